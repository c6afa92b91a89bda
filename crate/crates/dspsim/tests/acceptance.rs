//! Acceptance gate. Run with `cargo test -p dspsim --test acceptance -- --nocapture`
//! to see one PASS/FAIL line per criterion.

use std::ffi::OsString;

use dspsim::cli::main_with;
use dspsim::{evaluate, run_group, EvalOptions, Evaluation};
use dspsim_core::comm::{CommError, Communicator, ShardSpec};
use dspsim_core::cost::{op_count_reduction, predict_exact, CostInputs, Method};
use dspsim_core::ledger::OpKind;
use dspsim_core::model::{attention_along, init_input, init_params, ModelConfig};
use dspsim_core::schedules::ScheduleKind;
use dspsim_core::tensor::{add, concat, fill_seeded, split, AxisLabel::*, Tensor};

const RANKS: [usize; 3] = [1, 2, 4];
const SHAPES: [(usize, usize); 2] = [(8, 16), (4, 4)];

fn grid_config(temporal: usize, spatial: usize) -> ModelConfig {
    ModelConfig { batch: 1, temporal, spatial, hidden: 32, heads: 4, depth: 4, seed: 7, ..ModelConfig::default() }
}

fn grid() -> Vec<Evaluation> {
    let mut out = Vec::new();
    for n in RANKS {
        for (t, s) in SHAPES {
            for kind in ScheduleKind::ALL {
                out.push(evaluate(kind, &grid_config(t, s), n, &EvalOptions::default()).expect("grid run"));
            }
        }
    }
    out
}

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn record(&mut self, id: u32, name: &str, problems: Vec<String>) {
        if problems.is_empty() {
            println!("criterion {id} PASS {name}");
        } else {
            println!("criterion {id} FAIL {name}: {}", problems.join("; "));
            self.failures.push(format!("criterion {id}"));
        }
    }
}

/// Per-rank elements sent per block pair, written out independently of the
/// cost module.
fn expected_per_pair(kind: ScheduleKind, m: usize, n: usize) -> usize {
    match kind {
        ScheduleKind::Dsp => 2 * (n - 1) * m / (n * n),
        ScheduleKind::Ulysses => 8 * (n - 1) * m / (n * n),
        ScheduleKind::MegatronSp => 8 * (n - 1) * m / n,
    }
}

fn criterion_1(evals: &[Evaluation]) -> Vec<String> {
    evals
        .iter()
        .filter(|e| e.max_rel_err.is_nan() || e.max_rel_err > 1e-8)
        .map(|e| format!("{} N={} T={} S={} err={:e}", e.kind, e.n_ranks, e.config.temporal, e.config.spatial, e.max_rel_err))
        .collect()
}

fn criterion_2(evals: &[Evaluation]) -> Vec<String> {
    let mut problems = Vec::new();
    for e in evals {
        let m = e.config.activation_elements();
        let want = expected_per_pair(e.kind, m, e.n_ranks);
        for rank in 0..e.n_ranks {
            for (pair, got) in e.ledger.sent_per_pair(rank, e.config.pairs()).into_iter().enumerate() {
                if got != want {
                    problems.push(format!("{} N={} rank{rank} pair{pair}: {got} != {want}", e.kind, e.n_ranks));
                }
            }
        }
    }
    for n in RANKS.into_iter().filter(|&n| n > 1) {
        for (t, s) in SHAPES {
            let total = |k: ScheduleKind| {
                let e = evals.iter().find(|e| e.kind == k && e.n_ranks == n && e.config.temporal == t).unwrap();
                e.ledger.sent_elements(0, false)
            };
            let (d, u, mg) = (total(ScheduleKind::Dsp), total(ScheduleKind::Ulysses), total(ScheduleKind::MegatronSp));
            if 4 * d != u {
                problems.push(format!("N={n} T={t} S={s}: dsp:ulysses = {d}:{u}"));
            }
            if n * u != mg {
                problems.push(format!("N={n} T={t} S={s}: ulysses:megatron = {u}:{mg}"));
            }
        }
    }
    problems
}

fn criterion_3(evals: &[Evaluation]) -> Vec<String> {
    let mut problems = Vec::new();
    for e in evals.iter().filter(|e| e.n_ranks > 1) {
        let want = if e.kind == ScheduleKind::Dsp { 2 } else { 8 };
        for rank in 0..e.n_ranks {
            let ops = e.ledger.ops_per_pair(rank, e.config.pairs());
            if ops.iter().any(|&o| o != want) {
                problems.push(format!("{} N={} rank{rank}: ops per pair {ops:?}, want {want}", e.kind, e.n_ranks));
            }
        }
        if e.kind == ScheduleKind::Dsp {
            let body_ops = e.ledger.count_ops(0, OpKind::AllGather, false) + e.ledger.count_ops(0, OpKind::ReduceScatter, false);
            if body_ops != 0 {
                problems.push(format!("dsp N={} issued {body_ops} gather/scatter ops", e.n_ranks));
            }
        }
    }
    let reduction = op_count_reduction(2, 8);
    if reduction != 0.75 {
        problems.push(format!("reduction {reduction}"));
    }
    problems
}

fn criterion_4(evals: &[Evaluation]) -> Vec<String> {
    let mut problems = Vec::new();
    for e in evals.iter().filter(|e| e.n_ranks >= 2) {
        let (m, n) = (e.config.activation_elements(), e.n_ranks);
        let intermediate = e.config.mlp_ratio * m / n;
        for (rank, &peak) in e.ledger.peak_live.iter().enumerate() {
            let ok = match e.kind {
                ScheduleKind::MegatronSp => peak >= m,
                _ => peak <= m / n + intermediate,
            };
            if !ok {
                problems.push(format!("{} N={n} rank{rank}: peak {peak} (M={m})", e.kind));
            }
        }
    }
    problems
}

fn collective_properties() -> Vec<String> {
    let mut problems = Vec::new();
    for n in [2, 4] {
        for seed in 0..4u64 {
            let g = fill_seeded(vec![(Batch, 1), (Temporal, 2 * n), (Spatial, 2 * n), (Hidden, 3)], seed).unwrap();
            let body = |c: &mut dspsim::RankComm| {
                let shard = ShardSpec::new(Temporal, n).shard_of(&g, c.rank())?;
                let s = c.all_to_all(&shard, Spatial, Temporal, "a")?;
                let back = c.all_to_all(&s, Temporal, Spatial, "b")?;
                let gathered = c.all_gather(&shard, Temporal, "c")?;
                let part = c.reduce_scatter(&gathered, Temporal, "d")?;
                let summed = c.all_gather(&part, Temporal, "e")?;
                Ok::<_, CommError>((shard, s, back, gathered, summed))
            };
            let first = run_group(n, 8, body).unwrap();
            let second = run_group(n, 8, body).unwrap();
            let direct = split(&g, Spatial, n).unwrap();
            let mut sum = g.clone();
            for _ in 1..n {
                sum = add(&sum, &g).unwrap();
            }
            for (rank, (shard, s, back, gathered, summed)) in first.results.iter().enumerate() {
                if s != &direct[rank] {
                    problems.push(format!("all_to_all N={n} seed={seed} rank{rank} differs from direct reshard"));
                }
                if back != shard {
                    problems.push(format!("all_to_all inverse N={n} seed={seed} rank{rank}"));
                }
                if gathered != &g {
                    problems.push(format!("all_gather round trip N={n} seed={seed} rank{rank}"));
                }
                if summed != &sum {
                    problems.push(format!("reduce_scatter+all_gather != sum N={n} seed={seed}"));
                }
            }
            let bits = |r: &[(Tensor, Tensor, Tensor, Tensor, Tensor)]| -> Vec<u64> {
                r.iter().flat_map(|t| t.4.data().iter().chain(t.1.data()).map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
            };
            if first.ledger != second.ledger || bits(&first.results) != bits(&second.results) {
                problems.push(format!("non-deterministic group run N={n} seed={seed}"));
            }
        }
    }
    problems
}

fn slice_independence() -> Vec<String> {
    let mut problems = Vec::new();
    let cfg = ModelConfig { temporal: 4, spatial: 4, hidden: 8, heads: 2, depth: 2, ..ModelConfig::default() };
    let params = init_params(&cfg).unwrap();
    let x = init_input(&cfg).unwrap();
    for (axis, across, p) in [(Spatial, Temporal, &params[0]), (Temporal, Spatial, &params[1])] {
        let mut parts = split(&x, across, 4).unwrap();
        for (i, part) in parts.iter_mut().enumerate().skip(1) {
            *part = fill_seeded(part.dims().to_vec(), 1000 + i as u64).unwrap();
        }
        let noisy = concat(&parts, across).unwrap();
        let a = split(&attention_along(&x, axis, p).unwrap(), across, 4).unwrap();
        let b = split(&attention_along(&noisy, axis, p).unwrap(), across, 4).unwrap();
        if a[0] != b[0] {
            problems.push(format!("{axis:?} attention depends on other {across:?} slices"));
        }
    }
    problems
}

fn criterion_5(evals: &[Evaluation]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut check = |label: String, inputs: &CostInputs| {
        let lat = |m| predict_exact(m, inputs).est_latency_seconds;
        let (d, u, mg) = (lat(Method::Dsp), lat(Method::Ulysses), lat(Method::MegatronSp));
        if !(d < u && u < mg) {
            problems.push(format!("{label}: latency dsp={d:e} ulysses={u:e} megatron={mg:e}"));
        }
    };
    for e in evals.iter().filter(|e| e.n_ranks >= 2 && e.kind == ScheduleKind::Dsp) {
        check(format!("grid N={} T={}", e.n_ranks, e.config.temporal), &CostInputs::from_config(&e.config, e.n_ranks, 8));
    }
    for n in [2usize, 3, 4, 8, 16, 64, 256] {
        let cfg = ModelConfig { temporal: 256, spatial: 256, ..ModelConfig::default() };
        check(format!("analytic N={n}"), &CostInputs::from_config(&cfg, n, 8));
    }
    problems.extend(collective_properties());
    problems.extend(slice_independence());
    problems
}

fn cli(args: &[&str]) -> (i32, String) {
    let argv: Vec<OsString> = std::iter::once("dspsim").chain(args.iter().copied()).map(OsString::from).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err))
}

fn criterion_6() -> Vec<String> {
    let mut problems = Vec::new();
    let (code, out) = cli(&["verify"]);
    if code != 0 {
        problems.push(format!("verify exited {code}:\n{out}"));
    }
    let tag = "block1.switch_out";
    let (code, out) = cli(&["verify", "--schedule", "dsp", "--ranks", "2", "--tamper-ledger", tag]);
    if code != 1 || !out.contains(&format!("ledger mismatch at {tag}")) {
        problems.push(format!("tampered verify exited {code} without naming {tag}:\n{out}"));
    }
    problems
}

#[test]
fn acceptance() {
    let evals = grid();
    let mut gate = Gate { failures: Vec::new() };
    gate.record(1, "oracle equivalence within 1e-8", criterion_1(&evals));
    gate.record(2, "exact per-pair volumes and ratios", criterion_2(&evals));
    gate.record(3, "2 vs 8 collectives per pair (75% fewer)", criterion_3(&evals));
    gate.record(4, "peak live activation bounds", criterion_4(&evals));
    gate.record(5, "latency ranking and property suites", criterion_5(&evals));
    gate.record(6, "verify harness and tamper detection", criterion_6());
    assert!(gate.failures.is_empty(), "failed: {:?}", gate.failures);
}
