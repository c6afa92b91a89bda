//! Closed-form communication volume, op counts, memory and α-β latency for
//! each schedule, plus reconciliation against a measured ledger.
//!
//! Exact forward volumes per spatial/temporal pair, elements sent per rank:
//!
//! | method      | ops | elements          | asymptote |
//! |-------------|-----|-------------------|-----------|
//! | DSP         | 2   | 2·(N-1)·M / N²    | 2M/N      |
//! | Ulysses     | 8   | 8·(N-1)·M / N²    | 8M/N      |
//! | Megatron-SP | 8   | 8·(N-1)·M / N     | 8M        |
//! | Ring (est.) | 2(N-1) | 4·(N-1)·M / N  | 4M        |
//!
//! The `(N-1)/N` factor comes from not counting a rank's own chunk; the
//! asymptotes are its `N → ∞` limit. The Megatron-SP asymptote `8M` also
//! equals forward+backward traffic for one block (`2 · 4M`); the
//! `forward_backward` column doubles every forward figure for that reading.
//! The ring row is analytic only and never simulated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::ledger::{tag_block, CommLedger, EPILOGUE_TAG};
use crate::model::ModelConfig;
use crate::schedules::ScheduleKind;

/// Illustrative per-collective launch cost, seconds.
pub const DEFAULT_ALPHA: f64 = 10e-6;
/// Illustrative per-rank bandwidth, bytes per second.
pub const DEFAULT_BETA: f64 = 50e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Method {
    MegatronSp,
    Ulysses,
    Dsp,
    /// Analytic stand-in only.
    RingAttention,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dsp, Method::Ulysses, Method::MegatronSp, Method::RingAttention];

    pub fn is_simulated(self) -> bool {
        self != Method::RingAttention
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::MegatronSp => "megatron",
            Method::Ulysses => "ulysses",
            Method::Dsp => "dsp",
            Method::RingAttention => "ring",
        }
    }

    /// Volume as written in the comparison table.
    pub fn asymptotic_label(self) -> &'static str {
        match self {
            Method::MegatronSp => "8M",
            Method::Ulysses => "8M/N",
            Method::Dsp => "2M/N",
            Method::RingAttention => "4M",
        }
    }

    pub fn asymptotic_elements(self, m: f64, n: f64) -> f64 {
        match self {
            Method::MegatronSp => 8.0 * m,
            Method::Ulysses => 8.0 * m / n,
            Method::Dsp => 2.0 * m / n,
            Method::RingAttention => 4.0 * m,
        }
    }
}

impl From<ScheduleKind> for Method {
    fn from(k: ScheduleKind) -> Self {
        match k {
            ScheduleKind::MegatronSp => Method::MegatronSp,
            ScheduleKind::Ulysses => Method::Ulysses,
            ScheduleKind::Dsp => Method::Dsp,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostInputs {
    /// `M`, full activation element count.
    pub activation_elements: u64,
    /// `N`
    pub n_ranks: u64,
    pub pairs: u64,
    pub bytes_per_element: u64,
    pub alpha: f64,
    pub beta: f64,
}

impl CostInputs {
    pub fn from_config(cfg: &ModelConfig, n_ranks: usize, bytes_per_element: usize) -> Self {
        CostInputs {
            activation_elements: cfg.activation_elements() as u64,
            n_ranks: n_ranks as u64,
            pairs: cfg.pairs() as u64,
            bytes_per_element: bytes_per_element as u64,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }

    pub fn with_latency_model(mut self, alpha: f64, beta: f64) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostRow {
    pub method: Method,
    pub simulated: bool,
    pub n_ranks: u64,
    pub activation_elements: u64,
    pub pairs: u64,
    pub ops_per_pair: u64,
    /// Forward only, per rank, per pair.
    pub exact_elements_per_pair: u64,
    /// Doubled forward figure, for the forward+backward reading.
    pub forward_backward_elements_per_pair: u64,
    pub asymptotic_label: String,
    pub asymptotic_elements_per_pair: f64,
    /// Whole-model forward estimate: `ops·α + bytes/β`.
    pub est_latency_seconds: f64,
}

impl CostRow {
    pub fn exact_elements_total(&self) -> u64 {
        self.exact_elements_per_pair * self.pairs
    }

    /// Elements each collective of this method sends per rank.
    pub fn elements_per_op(&self) -> u64 {
        self.exact_elements_per_pair.checked_div(self.ops_per_pair).unwrap_or(0)
    }
}

pub fn latency_seconds(ops: u64, bytes: u64, alpha: f64, beta: f64) -> f64 {
    ops as f64 * alpha + bytes as f64 / beta
}

pub fn predict_exact(method: Method, inputs: &CostInputs) -> CostRow {
    let (m, n) = (inputs.activation_elements, inputs.n_ranks.max(1));
    let (ops_per_pair, exact) = match method {
        Method::Dsp => (2, 2 * (n - 1) * m / (n * n)),
        Method::Ulysses => (8, 8 * (n - 1) * m / (n * n)),
        Method::MegatronSp => (8, 8 * (n - 1) * m / n),
        Method::RingAttention => (2 * (n - 1), 4 * (n - 1) * m / n),
    };
    let bytes = exact * inputs.pairs * inputs.bytes_per_element;
    CostRow {
        method,
        simulated: method.is_simulated(),
        n_ranks: n,
        activation_elements: m,
        pairs: inputs.pairs,
        ops_per_pair,
        exact_elements_per_pair: exact,
        forward_backward_elements_per_pair: 2 * exact,
        asymptotic_label: method.asymptotic_label().into(),
        asymptotic_elements_per_pair: method.asymptotic_elements(m as f64, n as f64),
        est_latency_seconds: latency_seconds(ops_per_pair * inputs.pairs, bytes, inputs.alpha, inputs.beta),
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryRow {
    pub method: Method,
    /// Predicted high-water mark under the residual-plus-produced checkpoint
    /// convention the schedules report.
    pub peak_activation_elements: u64,
    /// `M` for Megatron-SP (a floor), `M/N + largest_layer_intermediate`
    /// otherwise (a ceiling).
    pub peak_bound: u64,
    pub peak_bound_is_lower: bool,
    /// Widest tensor a single layer materializes on one rank: the MLP hidden
    /// activation, `mlp_ratio · M / N`.
    pub largest_layer_intermediate: u64,
    pub param_elements_per_rank: u64,
    /// Parameters are fully replicated on every rank (no ZeRO-style sharding).
    pub params_replicated: bool,
}

/// Live-activation peak of the single-worker reference: residual plus one
/// layer output.
pub fn reference_peak(inputs: &CostInputs) -> u64 {
    2 * inputs.activation_elements
}

pub fn memory_rows(method: Method, inputs: &CostInputs, cfg: &ModelConfig) -> MemoryRow {
    let (m, n) = (inputs.activation_elements, inputs.n_ranks.max(1));
    let d = cfg.hidden as u64;
    let f = cfg.mlp_hidden() as u64;
    let depth = cfg.depth as u64;
    let sharded_per_block = 4 * d * d + 2 * d * f;
    let norms_per_block = 4 * d;
    let largest = cfg.mlp_ratio as u64 * m / n;
    match method {
        Method::MegatronSp => MemoryRow {
            method,
            peak_activation_elements: m + m / n,
            peak_bound: m,
            peak_bound_is_lower: true,
            largest_layer_intermediate: largest,
            param_elements_per_rank: depth * (sharded_per_block / n + norms_per_block),
            params_replicated: false,
        },
        _ => MemoryRow {
            method,
            peak_activation_elements: 2 * m / n,
            peak_bound: m / n + largest,
            peak_bound_is_lower: false,
            largest_layer_intermediate: largest,
            param_elements_per_rank: depth * (sharded_per_block + norms_per_block),
            params_replicated: true,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReconcileError {
    #[error("prediction is for {predicted} ranks but ledger has {measured}")]
    RankMismatch { predicted: u64, measured: usize },
    #[error("{0} has no simulated schedule to reconcile against")]
    NotSimulated(Method),
    #[error("ledger has a block tag {tag} beyond the predicted {pairs} pairs")]
    PairMismatch { tag: String, pairs: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairCheck {
    pub rank: usize,
    pub pair: usize,
    pub measured_elements: u64,
    pub predicted_elements: u64,
    pub measured_ops: u64,
    pub predicted_ops: u64,
}

impl PairCheck {
    pub fn matches(&self) -> bool {
        self.measured_elements == self.predicted_elements && self.measured_ops == self.predicted_ops
    }
}

/// One ledger entry whose size disagrees with the per-collective prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mismatch {
    pub rank: usize,
    pub tag: String,
    pub measured_elements: u64,
    pub expected_elements: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReconcileReport {
    pub method: Method,
    pub pass: bool,
    pub pairs: Vec<PairCheck>,
    pub mismatches: Vec<Mismatch>,
    /// Ledger self-consistency failure (conservation, byte widths), if any.
    pub consistency_error: Option<String>,
}

impl ReconcileReport {
    /// Stage tags of the offending entries, deduplicated, in ledger order.
    pub fn offending_tags(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = Vec::new();
        for m in &self.mismatches {
            if !tags.contains(&m.tag.as_str()) {
                tags.push(&m.tag);
            }
        }
        tags
    }
}

/// Compares a measured ledger with `predicted`, pair by pair and entry by
/// entry. Passes only on exact equality.
pub fn reconcile(predicted: &CostRow, measured: &CommLedger) -> Result<ReconcileReport, ReconcileError> {
    if !predicted.method.is_simulated() {
        return Err(ReconcileError::NotSimulated(predicted.method));
    }
    if predicted.n_ranks != measured.n_ranks as u64 {
        return Err(ReconcileError::RankMismatch { predicted: predicted.n_ranks, measured: measured.n_ranks });
    }
    let pairs = predicted.pairs as usize;
    if let Some(e) = measured
        .entries
        .iter()
        .find(|e| e.tag != EPILOGUE_TAG && tag_block(&e.tag).is_none_or(|b| b / 2 >= pairs))
    {
        return Err(ReconcileError::PairMismatch { tag: e.tag.clone(), pairs: predicted.pairs });
    }
    let per_op = predicted.elements_per_op();
    let mismatches: Vec<Mismatch> = measured
        .entries
        .iter()
        .filter(|e| e.tag != EPILOGUE_TAG && e.elements_sent as u64 != per_op)
        .map(|e| Mismatch {
            rank: e.rank,
            tag: e.tag.clone(),
            measured_elements: e.elements_sent as u64,
            expected_elements: per_op,
        })
        .collect();
    let mut checks = Vec::new();
    for rank in 0..measured.n_ranks {
        let sent = measured.sent_per_pair(rank, pairs);
        let ops = measured.ops_per_pair(rank, pairs);
        for pair in 0..pairs {
            checks.push(PairCheck {
                rank,
                pair,
                measured_elements: sent[pair] as u64,
                predicted_elements: predicted.exact_elements_per_pair,
                measured_ops: ops[pair] as u64,
                predicted_ops: predicted.ops_per_pair,
            });
        }
    }
    let consistency_error = measured.check_consistency().err().map(|e| format!("{e}"));
    let pass = mismatches.is_empty() && consistency_error.is_none() && checks.iter().all(PairCheck::matches);
    Ok(ReconcileReport { method: predicted.method, pass, pairs: checks, mismatches, consistency_error })
}

/// Measured whole-model volume ratios between schedules at one `N`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RatioCheck {
    pub n_ranks: u64,
    pub dsp_over_ulysses: f64,
    pub ulysses_over_megatron: f64,
    /// `4 · dsp == ulysses`
    pub dsp_ulysses_exact: bool,
    /// `N · ulysses == megatron`
    pub ulysses_megatron_exact: bool,
}

pub fn cross_schedule_ratios(n_ranks: u64, dsp: u64, ulysses: u64, megatron: u64) -> RatioCheck {
    let ratio = |a: u64, b: u64| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    RatioCheck {
        n_ranks,
        dsp_over_ulysses: ratio(dsp, ulysses),
        ulysses_over_megatron: ratio(ulysses, megatron),
        dsp_ulysses_exact: 4 * dsp == ulysses,
        ulysses_megatron_exact: n_ranks * ulysses == megatron,
    }
}

/// Fractional reduction in collective count, e.g. `1 - 2/8 = 0.75`.
pub fn op_count_reduction(ours: u64, baseline: u64) -> f64 {
    1.0 - ours as f64 / baseline as f64
}
