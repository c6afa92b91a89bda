//! Drives the schedules on a [`run_group`] and scores them against the
//! reference forward and the cost model.

use dspsim_core::cost::{
    memory_rows, predict_exact, reconcile, CostInputs, CostRow, MemoryRow, ReconcileError,
    ReconcileReport,
};
use dspsim_core::ledger::{CommLedger, EPILOGUE_TAG};
use dspsim_core::model::{init_input, init_params, reference_forward, BlockParams, ConfigError, ModelConfig};
use dspsim_core::schedules::{rank_forward, ScheduleError, ScheduleKind};
use dspsim_core::tensor::{max_rel_err, Tensor, TensorError};
use dspsim_core::ShardSpec;
use thiserror::Error;

use crate::runtime::{run_group, GroupError};

/// Relative L∞ bound between a gathered distributed output and the reference.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Group(#[from] GroupError<ScheduleError>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Reconcile(#[from] ReconcileError),
    #[error("ranks disagree on the gathered output")]
    Divergent,
}

#[derive(Debug, Clone)]
pub struct DistRun {
    pub kind: ScheduleKind,
    pub n_ranks: usize,
    /// Gathered global output (identical on every rank).
    pub output: Tensor,
    pub ledger: CommLedger,
    pub final_spec: ShardSpec,
    /// Parameter elements held by each rank.
    pub param_elements: Vec<usize>,
}

/// Runs `kind` on `n_ranks` simulated ranks.
pub fn distributed_forward(
    kind: ScheduleKind,
    cfg: &ModelConfig,
    params: &[BlockParams],
    x_global: &Tensor,
    n_ranks: usize,
    bytes_per_element: usize,
) -> Result<DistRun, RunError> {
    kind.check(cfg, n_ranks)?;
    let out = run_group(n_ranks, bytes_per_element, |comm| {
        rank_forward(kind, comm, cfg, params, x_global)
    })?;
    let mut results = out.results.into_iter();
    let first = results.next().expect("n_ranks >= 1");
    let mut param_elements = vec![first.param_elements];
    for r in results {
        if r.gathered != first.gathered {
            return Err(RunError::Divergent);
        }
        param_elements.push(r.param_elements);
    }
    Ok(DistRun {
        kind,
        n_ranks,
        output: first.gathered,
        ledger: out.ledger,
        final_spec: first.final_spec,
        param_elements,
    })
}

pub fn distributed_forward_dsp(
    cfg: &ModelConfig,
    params: &[BlockParams],
    x: &Tensor,
    n_ranks: usize,
    bytes_per_element: usize,
) -> Result<DistRun, RunError> {
    distributed_forward(ScheduleKind::Dsp, cfg, params, x, n_ranks, bytes_per_element)
}

pub fn distributed_forward_ulysses(
    cfg: &ModelConfig,
    params: &[BlockParams],
    x: &Tensor,
    n_ranks: usize,
    bytes_per_element: usize,
) -> Result<DistRun, RunError> {
    distributed_forward(ScheduleKind::Ulysses, cfg, params, x, n_ranks, bytes_per_element)
}

pub fn distributed_forward_megatron(
    cfg: &ModelConfig,
    params: &[BlockParams],
    x: &Tensor,
    n_ranks: usize,
    bytes_per_element: usize,
) -> Result<DistRun, RunError> {
    distributed_forward(ScheduleKind::MegatronSp, cfg, params, x, n_ranks, bytes_per_element)
}

/// Knobs for [`evaluate`] beyond the model config.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub bytes_per_element: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Test hook: add one element to the first ledger entry carrying this tag
    /// before reconciliation.
    pub tamper_tag: Option<String>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            bytes_per_element: 8,
            alpha: dspsim_core::cost::DEFAULT_ALPHA,
            beta: dspsim_core::cost::DEFAULT_BETA,
            tamper_tag: None,
        }
    }
}

/// Everything known about one (schedule, N, config) run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub kind: ScheduleKind,
    pub n_ranks: usize,
    pub config: ModelConfig,
    pub max_rel_err: f64,
    pub ledger: CommLedger,
    pub predicted: CostRow,
    pub memory: MemoryRow,
    pub reconcile: ReconcileReport,
    pub param_elements: Vec<usize>,
}

impl Evaluation {
    pub fn oracle_pass(&self) -> bool {
        self.max_rel_err <= ORACLE_TOLERANCE
    }

    pub fn peak_live(&self) -> usize {
        self.ledger.peak_live.iter().copied().max().unwrap_or(0)
    }

    pub fn memory_pass(&self) -> bool {
        let bound_ok = self.ledger.peak_live.iter().all(|&p| {
            if self.memory.peak_bound_is_lower {
                p as u64 >= self.memory.peak_bound
            } else {
                p as u64 <= self.memory.peak_bound
            }
        });
        let exact_ok = self.ledger.peak_live.iter().all(|&p| p as u64 == self.memory.peak_activation_elements);
        let params_ok = self.param_elements.iter().all(|&p| p as u64 == self.memory.param_elements_per_rank);
        bound_ok && exact_ok && params_ok
    }

    pub fn pass(&self) -> bool {
        self.oracle_pass() && self.reconcile.pass && self.memory_pass()
    }

    pub fn epilogue_elements(&self) -> usize {
        self.ledger.rank_entries(0).filter(|e| e.tag == EPILOGUE_TAG).map(|e| e.elements_sent).sum()
    }
}

fn tamper(ledger: &mut CommLedger, tag: &str) -> bool {
    let bpe = ledger.bytes_per_element;
    match ledger.entries.iter_mut().find(|e| e.tag == tag) {
        Some(e) => {
            e.elements_sent += 1;
            e.bytes_sent += bpe;
            true
        }
        None => false,
    }
}

/// Runs the reference and one schedule, then reconciles the ledger with the
/// cost model.
pub fn evaluate(
    kind: ScheduleKind,
    cfg: &ModelConfig,
    n_ranks: usize,
    opts: &EvalOptions,
) -> Result<Evaluation, RunError> {
    kind.check(cfg, n_ranks)?;
    let params = init_params(cfg)?;
    let x = init_input(cfg)?;
    let reference = reference_forward(cfg, &params, &x)?;
    let run = distributed_forward(kind, cfg, &params, &x, n_ranks, opts.bytes_per_element)?;
    let mut ledger = run.ledger;
    if let Some(tag) = &opts.tamper_tag {
        tamper(&mut ledger, tag);
    }
    let inputs = CostInputs::from_config(cfg, n_ranks, opts.bytes_per_element)
        .with_latency_model(opts.alpha, opts.beta);
    let predicted = predict_exact(kind.into(), &inputs);
    let reconcile = reconcile(&predicted, &ledger)?;
    Ok(Evaluation {
        kind,
        n_ranks,
        config: cfg.clone(),
        max_rel_err: max_rel_err(&run.output, &reference)?,
        memory: memory_rows(kind.into(), &inputs, cfg),
        ledger,
        predicted,
        reconcile,
        param_elements: run.param_elements,
    })
}
