//! Toy spatial-temporal transformer and its single-worker reference forward.
//!
//! Blocks alternate spatial attention (even index) and temporal attention
//! (odd index). Each block is pre-norm with no biases:
//!
//! ```text
//! x = x + Wo · attn_axis(LN1(x) · {Wq, Wk, Wv})
//! x = x + W2 · gelu(W1 · LN2(x))
//! ```
//!
//! Activations are `(B, T, S, D)`. Q/K/V weights are stored as
//! `(D, H, Dh)` and the output projection as `(H, Dh, D)` so that head
//! sharding is a plain `split` along `Head`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::tensor::{
    add, contract, fill_seeded, gelu, layer_norm, mix_seed, permute, softmax_slice, split,
    AxisLabel, Tensor, TensorError,
};
use AxisLabel::*;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{name} must be at least 1")]
    Zero { name: &'static str },
    #[error("heads ({heads}) must divide hidden ({hidden})")]
    HeadsDivideHidden { heads: usize, hidden: usize },
    #[error("depth ({0}) must be even so blocks form spatial/temporal pairs")]
    OddDepth(usize),
    #[error("{name} = {extent} is not divisible by ranks = {n_ranks}")]
    NotDivisible {
        name: &'static str,
        extent: usize,
        n_ranks: usize,
    },
    #[error("eps must be positive, got {0}")]
    Eps(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub batch: usize,
    pub temporal: usize,
    pub spatial: usize,
    pub hidden: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            batch: 1,
            temporal: 8,
            spatial: 16,
            hidden: 32,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            eps: 1e-5,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("batch", self.batch),
            ("temporal", self.temporal),
            ("spatial", self.spatial),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero { name });
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(ConfigError::HeadsDivideHidden { heads: self.heads, hidden: self.hidden });
        }
        if !self.depth.is_multiple_of(2) {
            return Err(ConfigError::OddDepth(self.depth));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(ConfigError::Eps(self.eps));
        }
        Ok(())
    }

    /// Config invariants plus `N | T`, `N | S`, `N | H` and `N | mlp_ratio·D`.
    pub fn validate_for_ranks(&self, n_ranks: usize) -> Result<(), ConfigError> {
        self.validate()?;
        if n_ranks == 0 {
            return Err(ConfigError::Zero { name: "ranks" });
        }
        for (name, extent) in [
            ("temporal", self.temporal),
            ("spatial", self.spatial),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden()),
        ] {
            if extent % n_ranks != 0 {
                return Err(ConfigError::NotDivisible { name, extent, n_ranks });
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.hidden
    }

    /// `M = B·T·S·D`.
    pub fn activation_elements(&self) -> usize {
        self.batch * self.temporal * self.spatial * self.hidden
    }

    pub fn pairs(&self) -> usize {
        self.depth / 2
    }

    pub fn activation_dims(&self) -> Vec<(AxisLabel, usize)> {
        vec![
            (Batch, self.batch),
            (Temporal, self.temporal),
            (Spatial, self.spatial),
            (Hidden, self.hidden),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BlockKind {
    SpatialAttn,
    TemporalAttn,
}

impl BlockKind {
    pub fn for_index(index: usize) -> Self {
        if index.is_multiple_of(2) {
            BlockKind::SpatialAttn
        } else {
            BlockKind::TemporalAttn
        }
    }

    /// The sequence axis attention runs over.
    pub fn axis(self) -> AxisLabel {
        match self {
            BlockKind::SpatialAttn => Spatial,
            BlockKind::TemporalAttn => Temporal,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::SpatialAttn => "spatial",
            BlockKind::TemporalAttn => "temporal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub kind: BlockKind,
    /// `(D, H, Dh)`
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `(H, Dh, D)`
    pub wo: Tensor,
    /// `(D, F)`
    pub w1: Tensor,
    /// `(F, D)`
    pub w2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

pub const WEIGHT_NAMES: [&str; 10] = [
    "wq", "wk", "wv", "wo", "w1", "w2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
];

/// Sub-seed for one weight: FNV-1a over `(seed, block, name)` (little-endian
/// integers), finalized with SplitMix.
pub fn weight_seed(seed: u64, block: usize, name: &str) -> u64 {
    mix_seed(&[&seed.to_le_bytes(), &(block as u64).to_le_bytes(), name.as_bytes()])
}

pub fn input_seed(seed: u64) -> u64 {
    mix_seed(&[&seed.to_le_bytes(), b"input"])
}

impl BlockParams {
    fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2, &self.ln1_gamma,
            &self.ln1_beta, &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    pub fn element_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Tensor-parallel shard for `rank` of `n_ranks`: Q/K/V column shards and
    /// the `Wo` row shard over heads, `W1` column and `W2` row shards over
    /// the MLP hidden axis. Layer-norm parameters stay replicated.
    pub fn tensor_parallel_shard(&self, rank: usize, n_ranks: usize) -> Result<Self, TensorError> {
        let take = |t: &Tensor, axis| -> Result<Tensor, TensorError> {
            Ok(split(t, axis, n_ranks)?.swap_remove(rank))
        };
        Ok(BlockParams {
            kind: self.kind,
            wq: take(&self.wq, Head)?,
            wk: take(&self.wk, Head)?,
            wv: take(&self.wv, Head)?,
            wo: take(&self.wo, Head)?,
            w1: take(&self.w1, MlpHidden)?,
            w2: take(&self.w2, MlpHidden)?,
            ln1_gamma: self.ln1_gamma.clone(),
            ln1_beta: self.ln1_beta.clone(),
            ln2_gamma: self.ln2_gamma.clone(),
            ln2_beta: self.ln2_beta.clone(),
        })
    }

    pub fn zeroed(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.dims().to_vec()).expect("dims already valid");
        BlockParams {
            kind: self.kind,
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            w1: z(&self.w1),
            w2: z(&self.w2),
            ln1_gamma: z(&self.ln1_gamma),
            ln1_beta: z(&self.ln1_beta),
            ln2_gamma: z(&self.ln2_gamma),
            ln2_beta: z(&self.ln2_beta),
        }
    }
}

pub fn init_params(cfg: &ModelConfig) -> Result<Vec<BlockParams>, ConfigError> {
    cfg.validate()?;
    let (d, h, dh, f) = (cfg.hidden, cfg.heads, cfg.head_dim(), cfg.mlp_hidden());
    let fill = |block: usize, name: &str, dims: Vec<(AxisLabel, usize)>| {
        fill_seeded(dims, weight_seed(cfg.seed, block, name)).expect("validated extents")
    };
    let gamma = |block: usize, name: &str| {
        let mut t = fill(block, name, vec![(Hidden, d)]);
        t.data_mut().iter_mut().for_each(|x| *x += 1.0);
        t
    };
    Ok((0..cfg.depth)
        .map(|i| BlockParams {
            kind: BlockKind::for_index(i),
            wq: fill(i, "wq", vec![(Hidden, d), (Head, h), (HeadDim, dh)]),
            wk: fill(i, "wk", vec![(Hidden, d), (Head, h), (HeadDim, dh)]),
            wv: fill(i, "wv", vec![(Hidden, d), (Head, h), (HeadDim, dh)]),
            wo: fill(i, "wo", vec![(Head, h), (HeadDim, dh), (Hidden, d)]),
            w1: fill(i, "w1", vec![(Hidden, d), (MlpHidden, f)]),
            w2: fill(i, "w2", vec![(MlpHidden, f), (Hidden, d)]),
            ln1_gamma: gamma(i, "ln1_gamma"),
            ln1_beta: fill(i, "ln1_beta", vec![(Hidden, d)]),
            ln2_gamma: gamma(i, "ln2_gamma"),
            ln2_beta: fill(i, "ln2_beta", vec![(Hidden, d)]),
        })
        .collect())
}

/// Seeded `(B, T, S, D)` input activation.
pub fn init_input(cfg: &ModelConfig) -> Result<Tensor, ConfigError> {
    cfg.validate()?;
    Ok(fill_seeded(cfg.activation_dims(), input_seed(cfg.seed)).expect("validated extents"))
}

/// `(q, k, v)`, each `(…, H, Dh)` where `…` are `h`'s non-hidden axes.
pub fn project_qkv(h: &Tensor, p: &BlockParams) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    Ok((
        contract(h, &p.wq, &[Hidden])?,
        contract(h, &p.wk, &[Hidden])?,
        contract(h, &p.wv, &[Hidden])?,
    ))
}

pub fn project_out(ctx: &Tensor, p: &BlockParams) -> Result<Tensor, TensorError> {
    contract(ctx, &p.wo, &[Head, HeadDim])
}

/// Scaled dot-product attention with `axis` as the sequence. Every other axis
/// except `HeadDim` (heads included) indexes an independent group.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, axis: AxisLabel) -> Result<Tensor, TensorError> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(TensorError::ShapeMismatch(format!(
            "q/k/v layouts differ: {:?} {:?} {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let seq = q.extent(axis)?;
    let dh = q.extent(HeadDim)?;
    let labels = q.labels();
    let order: Vec<AxisLabel> = labels
        .iter()
        .copied()
        .filter(|&a| a != axis && a != HeadDim)
        .chain([axis, HeadDim])
        .collect();
    let (qp, kp, vp) = (permute(q, &order)?, permute(k, &order)?, permute(v, &order)?);
    let scale = 1.0 / libm::sqrt(dh as f64);
    let block = seq * dh;
    let mut out = vec![0.0; qp.len()];
    let mut scores = vec![0.0; seq];
    for g in 0..qp.len() / block {
        let base = g * block;
        let (qg, kg, vg) = (
            &qp.data()[base..base + block],
            &kp.data()[base..base + block],
            &vp.data()[base..base + block],
        );
        for i in 0..seq {
            let qi = &qg[i * dh..(i + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &kg[j * dh..(j + 1) * dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_slice(&mut scores);
            let oi = &mut out[base + i * dh..base + (i + 1) * dh];
            for (j, &w) in scores.iter().enumerate() {
                for (o, &vv) in oi.iter_mut().zip(&vg[j * dh..(j + 1) * dh]) {
                    *o += w * vv;
                }
            }
        }
    }
    let ctx = Tensor::new(qp.dims().to_vec(), out)?;
    permute(&ctx, &labels)
}

/// Multi-head attention along `axis` (Temporal or Spatial) of a `(B,T,S,D)`
/// activation. Works with head-sharded parameters too; the head count is
/// read from the weights.
pub fn attention_along(x: &Tensor, axis: AxisLabel, p: &BlockParams) -> Result<Tensor, TensorError> {
    if !x.has_axis(axis) {
        return Err(TensorError::MissingAxis(axis));
    }
    let (q, k, v) = project_qkv(x, p)?;
    project_out(&attend(&q, &k, &v, axis)?, p)
}

pub fn mlp(h: &Tensor, p: &BlockParams) -> Result<Tensor, TensorError> {
    let hidden = gelu(&contract(h, &p.w1, &[Hidden])?);
    contract(&hidden, &p.w2, &[MlpHidden])
}

pub fn attn_norm(x: &Tensor, p: &BlockParams, eps: f64) -> Result<Tensor, TensorError> {
    layer_norm(x, Hidden, &p.ln1_gamma, &p.ln1_beta, eps)
}

pub fn mlp_norm(x: &Tensor, p: &BlockParams, eps: f64) -> Result<Tensor, TensorError> {
    layer_norm(x, Hidden, &p.ln2_gamma, &p.ln2_beta, eps)
}

pub fn block_forward(x: &Tensor, p: &BlockParams, eps: f64) -> Result<Tensor, TensorError> {
    let h = attn_norm(x, p, eps)?;
    let x = add(x, &attention_along(&h, p.kind.axis(), p)?)?;
    let h = mlp_norm(&x, p, eps)?;
    add(&x, &mlp(&h, p)?)
}

pub fn reference_forward(
    cfg: &ModelConfig,
    params: &[BlockParams],
    x: &Tensor,
) -> Result<Tensor, TensorError> {
    if x.dims() != &cfg.activation_dims()[..] {
        return Err(TensorError::ShapeMismatch(format!(
            "input {:?} does not match config {:?}",
            x.dims(),
            cfg.activation_dims()
        )));
    }
    params.iter().try_fold(x.clone(), |x, p| block_forward(&x, p, cfg.eps))
}
