//! Threaded process-group simulator, schedule drivers, reports and CLI for
//! the schedules in `dspsim-core`.

pub mod cli;
pub mod report;
pub mod run;
pub mod runtime;

pub use run::{
    distributed_forward, distributed_forward_dsp, distributed_forward_megatron,
    distributed_forward_ulysses, evaluate, DistRun, EvalOptions, Evaluation, RunError,
    ORACLE_TOLERANCE,
};
pub use runtime::{run_group, GroupError, GroupOutput, RankComm};
