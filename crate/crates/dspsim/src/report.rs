//! Versioned JSON report and its flat CSV projection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dspsim_core::cost::{cross_schedule_ratios, predict_exact, CostInputs, CostRow, Method, RatioCheck};
use dspsim_core::schedules::ScheduleKind;
use serde::{Deserialize, Serialize};

use crate::run::Evaluation;

pub const SCHEMA_VERSION: u32 = 1;

/// One (schedule, N, T, S) row. Every field is a scalar so the same struct
/// serializes to both JSON and CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub schedule: String,
    pub n_ranks: usize,
    pub batch: usize,
    pub temporal: usize,
    pub spatial: usize,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub activation_elements: u64,
    pub pairs: u64,
    pub max_rel_err: f64,
    pub oracle_pass: bool,
    /// Largest steady-state per-pair volume over all ranks and pairs.
    pub measured_elements_per_pair: u64,
    pub predicted_elements_per_pair: u64,
    pub forward_backward_elements_per_pair: u64,
    pub asymptotic_label: String,
    pub asymptotic_elements_per_pair: f64,
    pub measured_ops_per_pair: u64,
    pub predicted_ops_per_pair: u64,
    /// Rank 0 whole-model elements sent; includes the epilogue gather only
    /// when `epilogue_included`.
    pub measured_elements_total: u64,
    pub measured_bytes_total: u64,
    pub epilogue_included: bool,
    pub epilogue_elements: u64,
    pub peak_live_elements: u64,
    pub predicted_peak_elements: u64,
    pub peak_bound: u64,
    pub param_elements_per_rank: u64,
    pub params_replicated: bool,
    pub est_latency_seconds: f64,
    pub reconcile_pass: bool,
    pub memory_pass: bool,
    pub pass: bool,
    /// `;`-separated stage tags whose ledger entries disagree with the model.
    pub offending_tags: String,
}

impl RunRow {
    pub fn from_evaluation(e: &Evaluation, include_epilogue: bool) -> Self {
        let pairs = e.config.pairs();
        let (mut max_elems, mut max_ops) = (0, 0);
        for rank in 0..e.n_ranks {
            max_elems = max_elems.max(e.ledger.sent_per_pair(rank, pairs).into_iter().max().unwrap_or(0));
            max_ops = max_ops.max(e.ledger.ops_per_pair(rank, pairs).into_iter().max().unwrap_or(0));
        }
        RunRow {
            schedule: e.kind.name().into(),
            n_ranks: e.n_ranks,
            batch: e.config.batch,
            temporal: e.config.temporal,
            spatial: e.config.spatial,
            hidden: e.config.hidden,
            heads: e.config.heads,
            depth: e.config.depth,
            activation_elements: e.predicted.activation_elements,
            pairs: e.predicted.pairs,
            max_rel_err: e.max_rel_err,
            oracle_pass: e.oracle_pass(),
            measured_elements_per_pair: max_elems as u64,
            predicted_elements_per_pair: e.predicted.exact_elements_per_pair,
            forward_backward_elements_per_pair: e.predicted.forward_backward_elements_per_pair,
            asymptotic_label: e.predicted.asymptotic_label.clone(),
            asymptotic_elements_per_pair: e.predicted.asymptotic_elements_per_pair,
            measured_ops_per_pair: max_ops as u64,
            predicted_ops_per_pair: e.predicted.ops_per_pair,
            measured_elements_total: e.ledger.sent_elements(0, include_epilogue) as u64,
            measured_bytes_total: e.ledger.sent_bytes(0, include_epilogue) as u64,
            epilogue_included: include_epilogue,
            epilogue_elements: e.epilogue_elements() as u64,
            peak_live_elements: e.peak_live() as u64,
            predicted_peak_elements: e.memory.peak_activation_elements,
            peak_bound: e.memory.peak_bound,
            param_elements_per_rank: e.param_elements.first().copied().unwrap_or(0) as u64,
            params_replicated: e.memory.params_replicated,
            est_latency_seconds: e.predicted.est_latency_seconds,
            reconcile_pass: e.reconcile.pass,
            memory_pass: e.memory_pass(),
            pass: e.pass(),
            offending_tags: e.reconcile.offending_tags().join(";"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub bytes_per_element: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub mlp_ratio: usize,
    pub include_epilogue: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub temporal: usize,
    pub spatial: usize,
    #[serde(flatten)]
    pub check: RatioCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub generator: String,
    pub settings: Settings,
    pub runs: Vec<RunRow>,
    /// Ring attention, analytic only, one row per (N, T, S) simulated.
    pub analytic_rows: Vec<CostRow>,
    /// Measured whole-model volume ratios wherever all three schedules ran
    /// with N > 1 (a single rank sends nothing, so the ratios are undefined).
    pub ratios: Vec<RatioRow>,
    pub notes: Vec<String>,
    pub all_pass: bool,
}

impl Report {
    pub fn build(settings: Settings, evals: &[Evaluation]) -> Self {
        let runs: Vec<RunRow> =
            evals.iter().map(|e| RunRow::from_evaluation(e, settings.include_epilogue)).collect();

        let mut groups: BTreeMap<(usize, usize, usize), BTreeMap<ScheduleKind, u64>> = BTreeMap::new();
        let mut analytic_rows = Vec::new();
        for e in evals {
            let key = (e.config.temporal, e.config.spatial, e.n_ranks);
            let steady = e.ledger.sent_elements(0, false) as u64;
            let group = groups.entry(key).or_default();
            if group.is_empty() {
                let inputs = CostInputs::from_config(&e.config, e.n_ranks, settings.bytes_per_element)
                    .with_latency_model(settings.alpha, settings.beta);
                analytic_rows.push(predict_exact(Method::RingAttention, &inputs));
            }
            group.insert(e.kind, steady);
        }
        let ratios = groups
            .into_iter()
            .filter(|((_, _, n), _)| *n > 1)
            .filter_map(|((temporal, spatial, n), g)| {
                let get = |k| g.get(&k).copied();
                Some(RatioRow {
                    temporal,
                    spatial,
                    check: cross_schedule_ratios(
                        n as u64,
                        get(ScheduleKind::Dsp)?,
                        get(ScheduleKind::Ulysses)?,
                        get(ScheduleKind::MegatronSp)?,
                    ),
                })
            })
            .collect::<Vec<_>>();
        let ratios_ok = ratios
            .iter()
            .all(|r| r.check.dsp_ulysses_exact && r.check.ulysses_megatron_exact);
        let all_pass = runs.iter().all(|r| r.pass) && ratios_ok;
        Report {
            schema_version: SCHEMA_VERSION,
            generator: "dspsim".into(),
            settings,
            runs,
            analytic_rows,
            ratios,
            notes: vec![
                "volumes are forward-only elements sent per rank; forward_backward doubles them".into(),
                "ring attention rows are analytic and not simulated".into(),
                "parameters are replicated for dsp and ulysses; no optimizer-state sharding".into(),
            ],
            all_pass,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data") + "\n"
    }

    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.runs {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Fixed-width table for terminal output.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<9} {:>2} {:>4} {:>4} {:>12} {:>10} {:>10} {:>5} {:>9} {:>9} {:>12}  result",
            "schedule", "N", "T", "S", "max_rel_err", "meas/pair", "pred/pair", "ops", "peak", "bound", "latency_s"
        );
        for r in &self.runs {
            let verdict = if r.pass {
                "PASS".to_string()
            } else if !r.offending_tags.is_empty() {
                format!("FAIL ledger mismatch at {}", r.offending_tags)
            } else if !r.oracle_pass {
                "FAIL oracle".to_string()
            } else {
                "FAIL".to_string()
            };
            let _ = writeln!(
                out,
                "{:<9} {:>2} {:>4} {:>4} {:>12.3e} {:>10} {:>10} {:>2}/{:<2} {:>9} {:>9} {:>12.4e}  {}",
                r.schedule,
                r.n_ranks,
                r.temporal,
                r.spatial,
                r.max_rel_err,
                r.measured_elements_per_pair,
                r.predicted_elements_per_pair,
                r.measured_ops_per_pair,
                r.predicted_ops_per_pair,
                r.peak_live_elements,
                r.peak_bound,
                r.est_latency_seconds,
                verdict
            );
        }
        for r in &self.ratios {
            let _ = writeln!(
                out,
                "ratios N={} T={} S={}: dsp/ulysses={:.4} ulysses/megatron={:.4}",
                r.check.n_ranks, r.temporal, r.spatial, r.check.dsp_over_ulysses, r.check.ulysses_over_megatron
            );
        }
        let _ = writeln!(out, "{}", if self.all_pass { "ALL PASS" } else { "FAILURES PRESENT" });
        out
    }
}
