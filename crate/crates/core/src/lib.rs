//! Sequence-parallel forward schedules for a spatial-temporal transformer,
//! written against an abstract collective interface.
//!
//! This crate is `no_std` (with `alloc`). It holds the tensor kernels, the
//! model and its reference forward, the per-rank schedule bodies, the ledger
//! types and the analytic cost model. The threaded process group, CLI and
//! report formats live in the `dspsim` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod comm;
pub mod cost;
pub mod ledger;
pub mod model;
pub mod schedules;
pub mod tensor;

pub use comm::{CommError, Communicator, ShardSpec, SoloComm};
pub use cost::{CostInputs, CostRow, MemoryRow, Method, ReconcileReport};
pub use ledger::{CommLedger, LedgerEntry, OpKind};
pub use model::{BlockKind, BlockParams, ConfigError, ModelConfig};
pub use schedules::{DistState, ScheduleError, ScheduleKind};
pub use tensor::{AxisLabel, Tensor, TensorError};
