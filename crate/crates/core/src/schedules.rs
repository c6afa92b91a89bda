//! Per-rank bodies of the three sequence-parallel forward schedules.
//!
//! All three start from an activation sharded along `Temporal`:
//!
//! - **Megatron-SP**: weights are tensor-parallel sharded. Each layer
//!   all-gathers the normalized activation, computes with the local heads
//!   (or MLP columns) and reduce-scatters the partial output back to the
//!   temporal shard. Two all-gathers and two reduce-scatters per block.
//! - **Ulysses**: weights are replicated. Every attention moves q, k and v
//!   from the sequence-split layout to the head-split layout and moves the
//!   context back, four all-to-alls per block.
//! - **DSP**: weights are replicated. Spatial blocks run on the temporal
//!   shard, temporal blocks on the spatial shard; a single all-to-all
//!   switches the sharded axis on the way into and out of each temporal
//!   block. Attention and MLP bodies are communication-free.
//!
//! Live-activation checkpoints report the residual shard plus the tensor the
//! step just produced (collective output or layer output).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::comm::{CommError, Communicator, ShardSpec};
use crate::ledger::{block_tag, OpKind, EPILOGUE_TAG};
use crate::model::{
    attend, attn_norm, mlp, mlp_norm, project_out, project_qkv, BlockKind, BlockParams, ConfigError,
    ModelConfig,
};
use crate::tensor::{add, AxisLabel, Tensor, TensorError};
use AxisLabel::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ScheduleKind {
    MegatronSp,
    Ulysses,
    Dsp,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Dsp, ScheduleKind::Ulysses, ScheduleKind::MegatronSp];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::MegatronSp => "megatron",
            ScheduleKind::Ulysses => "ulysses",
            ScheduleKind::Dsp => "dsp",
        }
    }

    /// Divisibility requirements of this schedule on `n_ranks`.
    pub fn check(self, cfg: &ModelConfig, n_ranks: usize) -> Result<(), ConfigError> {
        cfg.validate()?;
        if n_ranks == 0 {
            return Err(ConfigError::Zero { name: "ranks" });
        }
        let needs: &[(&'static str, usize)] = match self {
            ScheduleKind::Dsp => &[("temporal", cfg.temporal), ("spatial", cfg.spatial)],
            ScheduleKind::Ulysses => &[("temporal", cfg.temporal), ("heads", cfg.heads)],
            ScheduleKind::MegatronSp => &[
                ("temporal", cfg.temporal),
                ("heads", cfg.heads),
                ("mlp_hidden", cfg.mlp_hidden()),
            ],
        };
        for &(name, extent) in needs {
            if extent % n_ranks != 0 {
                return Err(ConfigError::NotDivisible { name, extent, n_ranks });
            }
        }
        Ok(())
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dsp" => Ok(ScheduleKind::Dsp),
            "ulysses" => Ok(ScheduleKind::Ulysses),
            "megatron" | "megatron-sp" | "megatronsp" => Ok(ScheduleKind::MegatronSp),
            other => Err(format!("unknown schedule '{other}'")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("switch requested to the axis already sharded ({0})")]
    NoOpSwitch(AxisLabel),
}

/// One rank's view of a sharded activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DistState {
    pub spec: ShardSpec,
    pub shard: Tensor,
}

/// Moves the sharded axis to `to_axis` with one all-to-all.
pub fn dynamic_switch<C: Communicator>(
    comm: &mut C,
    state: DistState,
    to_axis: AxisLabel,
    tag: &str,
) -> Result<DistState, ScheduleError> {
    if state.spec.axis == to_axis {
        return Err(ScheduleError::NoOpSwitch(to_axis));
    }
    let extent = state.shard.extent(to_axis)?;
    if extent % comm.n_ranks() != 0 {
        return Err(TensorError::Divisibility { axis: to_axis, extent, parts: comm.n_ranks() }.into());
    }
    let shard = comm.all_to_all(&state.shard, to_axis, state.spec.axis, tag)?;
    comm.record_live(state.shard.len() + shard.len());
    Ok(DistState { spec: ShardSpec::new(to_axis, state.spec.n_ranks), shard })
}

/// All-gathers the activation along its current shard axis under the
/// epilogue tag.
pub fn gather_output<C: Communicator>(comm: &mut C, state: &DistState) -> Result<Tensor, ScheduleError> {
    Ok(comm.all_gather(&state.shard, state.spec.axis, EPILOGUE_TAG)?)
}

fn residual_add<C: Communicator>(comm: &mut C, x: &Tensor, out: &Tensor) -> Result<Tensor, ScheduleError> {
    comm.record_live(x.len() + out.len());
    Ok(add(x, out)?)
}

/// Block forward on a local shard whose sharded axis is not the attention axis.
fn local_block<C: Communicator>(
    comm: &mut C,
    x: &Tensor,
    p: &BlockParams,
    eps: f64,
) -> Result<Tensor, ScheduleError> {
    let h = attn_norm(x, p, eps)?;
    let (q, k, v) = project_qkv(&h, p)?;
    let attn = project_out(&attend(&q, &k, &v, p.kind.axis())?, p)?;
    let x = residual_add(comm, x, &attn)?;
    let h = mlp_norm(&x, p, eps)?;
    let m = mlp(&h, p)?;
    residual_add(comm, &x, &m)
}

pub fn dsp_rank_forward<C: Communicator>(
    comm: &mut C,
    cfg: &ModelConfig,
    params: &[BlockParams],
    x_shard: Tensor,
) -> Result<DistState, ScheduleError> {
    let n = comm.n_ranks();
    ScheduleKind::Dsp.check(cfg, n)?;
    let mut state = DistState { spec: ShardSpec::new(Temporal, n), shard: x_shard };
    comm.record_live(state.shard.len());
    for (i, p) in params.iter().enumerate() {
        if p.kind == BlockKind::TemporalAttn {
            state = dynamic_switch(comm, state, Spatial, &block_tag(i, "switch_in"))?;
        }
        state.shard = local_block(comm, &state.shard, p, cfg.eps)?;
        if p.kind == BlockKind::TemporalAttn {
            state = dynamic_switch(comm, state, Temporal, &block_tag(i, "switch_out"))?;
        }
    }
    Ok(state)
}

pub fn ulysses_rank_forward<C: Communicator>(
    comm: &mut C,
    cfg: &ModelConfig,
    params: &[BlockParams],
    x_shard: Tensor,
) -> Result<DistState, ScheduleError> {
    let n = comm.n_ranks();
    ScheduleKind::Ulysses.check(cfg, n)?;
    let mut x = x_shard;
    comm.record_live(x.len());
    for (i, p) in params.iter().enumerate() {
        let h = attn_norm(&x, p, cfg.eps)?;
        let (q, k, v) = project_qkv(&h, p)?;
        let mut to_heads = |t: &Tensor, name: &str| -> Result<Tensor, ScheduleError> {
            let out = comm.all_to_all(t, Head, Temporal, &block_tag(i, name))?;
            comm.record_live(x.len() + out.len());
            Ok(out)
        };
        let (q, k, v) = (to_heads(&q, "attn.q")?, to_heads(&k, "attn.k")?, to_heads(&v, "attn.v")?);
        let ctx = attend(&q, &k, &v, p.kind.axis())?;
        let ctx = comm.all_to_all(&ctx, Temporal, Head, &block_tag(i, "attn.out"))?;
        comm.record_live(x.len() + ctx.len());
        let attn = project_out(&ctx, p)?;
        x = residual_add(comm, &x, &attn)?;
        let h = mlp_norm(&x, p, cfg.eps)?;
        let m = mlp(&h, p)?;
        x = residual_add(comm, &x, &m)?;
    }
    Ok(DistState { spec: ShardSpec::new(Temporal, n), shard: x })
}

/// `params` must already be this rank's tensor-parallel shard.
pub fn megatron_rank_forward<C: Communicator>(
    comm: &mut C,
    cfg: &ModelConfig,
    params: &[BlockParams],
    x_shard: Tensor,
) -> Result<DistState, ScheduleError> {
    let n = comm.n_ranks();
    ScheduleKind::MegatronSp.check(cfg, n)?;
    let mut x = x_shard;
    comm.record_live(x.len());
    for (i, p) in params.iter().enumerate() {
        let h = attn_norm(&x, p, cfg.eps)?;
        let full = comm.all_gather(&h, Temporal, &block_tag(i, "attn.allgather"))?;
        comm.record_live(x.len() + full.len());
        let (q, k, v) = project_qkv(&full, p)?;
        let partial = project_out(&attend(&q, &k, &v, p.kind.axis())?, p)?;
        let attn = comm.reduce_scatter(&partial, Temporal, &block_tag(i, "attn.reducescatter"))?;
        x = residual_add(comm, &x, &attn)?;

        let h = mlp_norm(&x, p, cfg.eps)?;
        let full = comm.all_gather(&h, Temporal, &block_tag(i, "mlp.allgather"))?;
        comm.record_live(x.len() + full.len());
        let partial = mlp(&full, p)?;
        let m = comm.reduce_scatter(&partial, Temporal, &block_tag(i, "mlp.reducescatter"))?;
        x = residual_add(comm, &x, &m)?;
    }
    Ok(DistState { spec: ShardSpec::new(Temporal, n), shard: x })
}

/// What one rank ends with after a schedule and its epilogue gather.
#[derive(Debug, Clone)]
pub struct RankOutput {
    pub gathered: Tensor,
    pub final_spec: ShardSpec,
    pub param_elements: usize,
}

/// Runs `kind` on this rank from the replicated global input and full
/// parameters: takes the rank's temporal shard, shards weights where the
/// schedule requires it, and gathers the result.
pub fn rank_forward<C: Communicator>(
    kind: ScheduleKind,
    comm: &mut C,
    cfg: &ModelConfig,
    params: &[BlockParams],
    x_global: &Tensor,
) -> Result<RankOutput, ScheduleError> {
    let (rank, n) = (comm.rank(), comm.n_ranks());
    kind.check(cfg, n)?;
    let x_shard = ShardSpec::new(Temporal, n).shard_of(x_global, rank)?;
    let (state, param_elements) = match kind {
        ScheduleKind::Dsp => (dsp_rank_forward(comm, cfg, params, x_shard)?, count(params)),
        ScheduleKind::Ulysses => (ulysses_rank_forward(comm, cfg, params, x_shard)?, count(params)),
        ScheduleKind::MegatronSp => {
            let local = params
                .iter()
                .map(|p| p.tensor_parallel_shard(rank, n))
                .collect::<Result<Vec<_>, _>>()?;
            (megatron_rank_forward(comm, cfg, &local, x_shard)?, count(&local))
        }
    };
    let gathered = gather_output(comm, &state)?;
    Ok(RankOutput { gathered, final_spec: state.spec, param_elements })
}

fn count(params: &[BlockParams]) -> usize {
    params.iter().map(BlockParams::element_count).sum()
}

/// One collective in a schedule's planned sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedCollective {
    pub block: usize,
    pub op: OpKind,
    pub tag: String,
    /// Human-readable description, e.g. `switch(T->S)` or `a2a q (T-split -> H-split)`.
    pub what: String,
}

/// One line of a schedule trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanStep {
    Compute { block: usize, what: String },
    Collective(PlannedCollective),
}

/// Shard axis an activation sits on while `block` computes.
fn compute_axis(kind: ScheduleKind, block: BlockKind) -> AxisLabel {
    match (kind, block) {
        (ScheduleKind::Dsp, BlockKind::TemporalAttn) => Spatial,
        _ => Temporal,
    }
}

/// The steady-state collective sequence `kind` issues for `depth` blocks,
/// without executing anything.
pub fn plan(kind: ScheduleKind, depth: usize) -> Vec<PlanStep> {
    let mut steps = Vec::new();
    let coll = |block, op, stage: &str, what: String| {
        PlanStep::Collective(PlannedCollective { block, op, tag: block_tag(block, stage), what })
    };
    let compute = |block, what: &str| PlanStep::Compute { block, what: what.into() };
    for i in 0..depth {
        let bk = BlockKind::for_index(i);
        let seq = bk.axis();
        match kind {
            ScheduleKind::Dsp => {
                if bk == BlockKind::TemporalAttn {
                    steps.push(coll(i, OpKind::AllToAll, "switch_in", "switch(T->S)".into()));
                }
                steps.push(compute(i, &format!("attn({seq}) local")));
                steps.push(compute(i, "mlp local"));
                if bk == BlockKind::TemporalAttn {
                    steps.push(coll(i, OpKind::AllToAll, "switch_out", "switch(S->T)".into()));
                }
            }
            ScheduleKind::Ulysses => {
                steps.push(compute(i, "norm + qkv projection"));
                for name in ["q", "k", "v"] {
                    steps.push(coll(i, OpKind::AllToAll, &format!("attn.{name}"), format!("a2a {name} (T-split -> H-split)")));
                }
                steps.push(compute(i, &format!("attn({seq}) on local heads")));
                steps.push(coll(i, OpKind::AllToAll, "attn.out", "a2a out (H-split -> T-split)".into()));
                steps.push(compute(i, "out projection + mlp"));
            }
            ScheduleKind::MegatronSp => {
                steps.push(coll(i, OpKind::AllGather, "attn.allgather", "allgather(T)".into()));
                steps.push(compute(i, &format!("attn({seq}) on local heads")));
                steps.push(coll(i, OpKind::ReduceScatter, "attn.reducescatter", "reducescatter(T)".into()));
                steps.push(coll(i, OpKind::AllGather, "mlp.allgather", "allgather(T)".into()));
                steps.push(compute(i, "mlp on local columns"));
                steps.push(coll(i, OpKind::ReduceScatter, "mlp.reducescatter", "reducescatter(T)".into()));
            }
        }
    }
    steps
}

pub fn planned_collectives(kind: ScheduleKind, depth: usize) -> Vec<PlannedCollective> {
    plan(kind, depth)
        .into_iter()
        .filter_map(|s| match s {
            PlanStep::Collective(c) => Some(c),
            PlanStep::Compute { .. } => None,
        })
        .collect()
}

/// ASCII trace of the planned schedule, one step per line.
pub fn explain(kind: ScheduleKind, depth: usize) -> String {
    let mut out = format!("schedule {kind}, depth {depth}\n");
    for step in plan(kind, depth) {
        let (block, body) = match &step {
            PlanStep::Compute { block, what } => (*block, what.clone()),
            PlanStep::Collective(c) => (c.block, format!("{} [{}] tag={}", c.what, c.op, c.tag)),
        };
        let bk = BlockKind::for_index(block);
        let shard = match (&step, kind) {
            // switch_in lines are issued from the temporal shard
            (PlanStep::Collective(c), ScheduleKind::Dsp) if c.tag.ends_with("switch_in") => Temporal,
            _ => compute_axis(kind, bk),
        };
        out.push_str(&format!("block{block}[{bk},{shard}-shard] {body}\n"));
    }
    out
}
