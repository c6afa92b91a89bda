use dspsim_core::model::{init_input, init_params, reference_forward, ModelConfig};

const GOLDEN: &str = include_str!("data/reference_b1_t2_s2_d4_h2_depth2_seed7.txt");

fn golden_values() -> Vec<f64> {
    GOLDEN
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.trim().parse().unwrap())
        .collect()
}

#[test]
fn reference_forward_matches_frozen_output() {
    let cfg = ModelConfig { batch: 1, temporal: 2, spatial: 2, hidden: 4, heads: 2, depth: 2, seed: 7, ..Default::default() };
    let params = init_params(&cfg).unwrap();
    let x = init_input(&cfg).unwrap();
    let y = reference_forward(&cfg, &params, &x).unwrap();
    let want = golden_values();
    assert_eq!(y.len(), want.len());
    for (got, want) in y.data().iter().zip(&want) {
        assert!((got - want).abs() <= 1e-15 * want.abs().max(1e-3), "{got} vs {want}");
    }
    let sum: f64 = y.data().iter().sum();
    assert!((sum - -0.05998066148807958).abs() < 1e-14);
}

#[test]
fn reference_forward_is_repeatable() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg).unwrap();
    let x = init_input(&cfg).unwrap();
    let a = reference_forward(&cfg, &params, &x).unwrap();
    let b = reference_forward(&cfg, &params, &x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
