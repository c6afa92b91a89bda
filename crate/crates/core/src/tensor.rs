//! Dense row-major `f64` tensors with labeled axes.
//!
//! Every tensor carries an ordered list of `(AxisLabel, extent)` pairs; the
//! last listed axis is contiguous in memory. There are no views or strides:
//! `permute`, `split` and `concat` always materialize a fresh buffer, which
//! keeps every kernel bit-reproducible.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

/// Logical axis of an activation or weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum AxisLabel {
    Batch,
    Temporal,
    Spatial,
    Head,
    Hidden,
    HeadDim,
    /// Flattened `T·S` sequence.
    Token,
    MlpHidden,
}

impl AxisLabel {
    pub fn short(self) -> &'static str {
        match self {
            AxisLabel::Batch => "B",
            AxisLabel::Temporal => "T",
            AxisLabel::Spatial => "S",
            AxisLabel::Head => "H",
            AxisLabel::Hidden => "D",
            AxisLabel::HeadDim => "Dh",
            AxisLabel::Token => "TS",
            AxisLabel::MlpHidden => "F",
        }
    }
}

impl fmt::Display for AxisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("axis {axis} with extent {extent} is not divisible into {parts} parts")]
    Divisibility {
        axis: AxisLabel,
        extent: usize,
        parts: usize,
    },
    #[error("axis {0} not present")]
    MissingAxis(AxisLabel),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Dims = Vec<(AxisLabel, usize)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

fn check_dims(dims: &[(AxisLabel, usize)]) -> Result<usize, TensorError> {
    let mut count = 1usize;
    for (i, &(axis, extent)) in dims.iter().enumerate() {
        if extent == 0 {
            return Err(TensorError::InvalidShape(format!("axis {axis} has zero extent")));
        }
        if dims[..i].iter().any(|&(a, _)| a == axis) {
            return Err(TensorError::InvalidShape(format!("axis {axis} listed twice")));
        }
        count = count
            .checked_mul(extent)
            .ok_or_else(|| TensorError::InvalidShape(String::from("element count overflows")))?;
    }
    Ok(count)
}

pub fn format_dims(dims: &[(AxisLabel, usize)]) -> String {
    let parts: Vec<String> = dims.iter().map(|(a, e)| format!("{a}={e}")).collect();
    format!("({})", parts.join(","))
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self, TensorError> {
        let count = check_dims(&dims)?;
        if count != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "{} expects {count} elements, got {}",
                format_dims(&dims),
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self, TensorError> {
        let count = check_dims(&dims)?;
        Ok(Tensor { dims, data: vec![0.0; count] })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self, TensorError> {
        let count = check_dims(&dims)?;
        Ok(Tensor { dims, data: vec![value; count] })
    }

    pub fn dims(&self) -> &[(AxisLabel, usize)] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Vec<AxisLabel> {
        self.dims.iter().map(|&(a, _)| a).collect()
    }

    pub fn position(&self, axis: AxisLabel) -> Result<usize, TensorError> {
        self.dims
            .iter()
            .position(|&(a, _)| a == axis)
            .ok_or(TensorError::MissingAxis(axis))
    }

    pub fn extent(&self, axis: AxisLabel) -> Result<usize, TensorError> {
        Ok(self.dims[self.position(axis)?].1)
    }

    pub fn has_axis(&self, axis: AxisLabel) -> bool {
        self.dims.iter().any(|&(a, _)| a == axis)
    }

    /// Elements before, along, and after `axis` in row-major order.
    fn outer_axis_inner(&self, axis: AxisLabel) -> Result<(usize, usize, usize), TensorError> {
        let pos = self.position(axis)?;
        let outer = self.dims[..pos].iter().map(|d| d.1).product();
        let inner = self.dims[pos + 1..].iter().map(|d| d.1).product();
        Ok((outer, self.dims[pos].1, inner))
    }
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix_finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `index`-th output of a SplitMix64 generator seeded with `seed`:
/// `finalize(seed + (index + 1) * 0x9E3779B97F4A7C15)`.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    splitmix_finalize(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(SPLITMIX_GAMMA)))
}

/// Maps a 64-bit word to `[-0.1, 0.1)` using its top 53 bits.
pub fn unit_to_range(word: u64) -> f64 {
    let u = (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (2.0 * u - 1.0) * 0.1
}

/// Deterministic fill: element `i` is `unit_to_range(splitmix64(seed, i))`.
pub fn fill_seeded(dims: Dims, seed: u64) -> Result<Tensor, TensorError> {
    let count = check_dims(&dims)?;
    let data = (0..count as u64).map(|i| unit_to_range(splitmix64(seed, i))).collect();
    Ok(Tensor { dims, data })
}

/// 64-bit FNV-1a over `bytes`, passed through the SplitMix finalizer.
pub fn mix_seed(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") and ("a","bc") differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix_finalize(h)
}

fn row_major_strides(dims: &[(AxisLabel, usize)]) -> Vec<usize> {
    let mut strides = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1].1;
    }
    strides
}

pub fn permute(t: &Tensor, order: &[AxisLabel]) -> Result<Tensor, TensorError> {
    if order.len() != t.dims.len() {
        return Err(TensorError::InvalidPermutation(format!(
            "{} axes requested for tensor {}",
            order.len(),
            format_dims(&t.dims)
        )));
    }
    let mut src_pos = Vec::with_capacity(order.len());
    for (i, &axis) in order.iter().enumerate() {
        if order[..i].contains(&axis) {
            return Err(TensorError::InvalidPermutation(format!("axis {axis} repeated")));
        }
        let pos = t
            .position(axis)
            .map_err(|_| TensorError::InvalidPermutation(format!("unknown axis {axis}")))?;
        src_pos.push(pos);
    }
    if src_pos.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(t.clone());
    }
    let src_strides = row_major_strides(&t.dims);
    let dims: Dims = src_pos.iter().map(|&p| t.dims[p]).collect();
    let strides: Vec<usize> = src_pos.iter().map(|&p| src_strides[p]).collect();
    let extents: Vec<usize> = dims.iter().map(|d| d.1).collect();

    let mut data = Vec::with_capacity(t.data.len());
    let mut index = vec![0usize; dims.len()];
    let mut offset = 0usize;
    for _ in 0..t.data.len() {
        data.push(t.data[offset]);
        for k in (0..index.len()).rev() {
            index[k] += 1;
            offset += strides[k];
            if index[k] < extents[k] {
                break;
            }
            offset -= strides[k] * extents[k];
            index[k] = 0;
        }
    }
    Ok(Tensor { dims, data })
}

pub fn split(t: &Tensor, axis: AxisLabel, parts: usize) -> Result<Vec<Tensor>, TensorError> {
    let (outer, extent, inner) = t.outer_axis_inner(axis)?;
    if parts == 0 || extent % parts != 0 {
        return Err(TensorError::Divisibility { axis, extent, parts });
    }
    let chunk = extent / parts;
    let pos = t.position(axis)?;
    let mut dims = t.dims.clone();
    dims[pos].1 = chunk;
    let slab = chunk * inner;
    Ok((0..parts)
        .map(|p| {
            let mut data = Vec::with_capacity(outer * slab);
            for o in 0..outer {
                let start = o * extent * inner + p * slab;
                data.extend_from_slice(&t.data[start..start + slab]);
            }
            Tensor { dims: dims.clone(), data }
        })
        .collect())
}

pub fn concat(ts: &[Tensor], axis: AxisLabel) -> Result<Tensor, TensorError> {
    let first = ts
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch(String::from("concat of zero tensors")))?;
    let pos = first.position(axis)?;
    let mut total = 0;
    for t in ts {
        let same_layout = t.dims.len() == first.dims.len()
            && t.dims.iter().zip(&first.dims).enumerate().all(|(i, (a, b))| {
                a.0 == b.0 && (i == pos || a.1 == b.1)
            });
        if !same_layout {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot concat {} with {} along {axis}",
                format_dims(&t.dims),
                format_dims(&first.dims)
            )));
        }
        total += t.dims[pos].1;
    }
    let (outer, _, inner) = first.outer_axis_inner(axis)?;
    let mut dims = first.dims.clone();
    dims[pos].1 = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in ts {
            let slab = t.dims[pos].1 * inner;
            data.extend_from_slice(&t.data[o * slab..(o + 1) * slab]);
        }
    }
    Ok(Tensor { dims, data })
}

/// Contracts `a` and `b` over the shared axes in `axes`.
///
/// The result lists `a`'s remaining axes followed by `b`'s remaining axes.
/// Sums run in ascending order of the flattened contracted index.
pub fn contract(a: &Tensor, b: &Tensor, axes: &[AxisLabel]) -> Result<Tensor, TensorError> {
    let mut k = 1usize;
    for &axis in axes {
        let (ea, eb) = (a.extent(axis)?, b.extent(axis)?);
        if ea != eb {
            return Err(TensorError::ShapeMismatch(format!(
                "contracted axis {axis}: {ea} vs {eb}"
            )));
        }
        k *= ea;
    }
    let a_free: Dims = a.dims.iter().copied().filter(|d| !axes.contains(&d.0)).collect();
    let b_free: Dims = b.dims.iter().copied().filter(|d| !axes.contains(&d.0)).collect();
    if let Some(&(dup, _)) = a_free.iter().find(|d| b_free.iter().any(|e| e.0 == d.0)) {
        return Err(TensorError::ShapeMismatch(format!(
            "axis {dup} appears uncontracted on both operands"
        )));
    }
    let a_order: Vec<AxisLabel> = a_free.iter().map(|d| d.0).chain(axes.iter().copied()).collect();
    let b_order: Vec<AxisLabel> = axes.iter().copied().chain(b_free.iter().map(|d| d.0)).collect();
    let ap = permute(a, &a_order)?;
    let bp = permute(b, &b_order)?;
    let m: usize = a_free.iter().map(|d| d.1).product();
    let n: usize = b_free.iter().map(|d| d.1).product();

    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ap.data[i * k..(i + 1) * k];
        let out = &mut data[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bp.data[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let mut dims = a_free;
    dims.extend(b_free);
    Tensor::new(dims, data)
}

pub fn matmul(a: &Tensor, b: &Tensor, contract_axis: AxisLabel) -> Result<Tensor, TensorError> {
    contract(a, b, &[contract_axis])
}

fn same_dims(a: &Tensor, b: &Tensor, op: &str) -> Result<(), TensorError> {
    if a.dims != b.dims {
        return Err(TensorError::ShapeMismatch(format!(
            "{op}: {} vs {}",
            format_dims(&a.dims),
            format_dims(&b.dims)
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_dims(a, b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor { dims: a.dims.clone(), data })
}

pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<(), TensorError> {
    same_dims(a, b, "add")?;
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    Ok(())
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
pub fn gelu_scalar(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + libm::tanh(SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)))
}

/// Tanh-approximated GELU, element-wise.
pub fn gelu(t: &Tensor) -> Tensor {
    Tensor { dims: t.dims.clone(), data: t.data.iter().map(|&x| gelu_scalar(x)).collect() }
}

/// In-place max-shifted softmax over a contiguous slice.
pub fn softmax_slice(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Runs `f` on every 1-D lane along `axis`, gathering strided values into a
/// scratch buffer and writing them back.
fn map_lanes(
    t: &Tensor,
    axis: AxisLabel,
    mut f: impl FnMut(&mut [f64]),
) -> Result<Tensor, TensorError> {
    let (outer, extent, inner) = t.outer_axis_inner(axis)?;
    let mut data = t.data.clone();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (j, v) in lane.iter_mut().enumerate() {
                *v = data[base + j * inner];
            }
            f(&mut lane);
            for (j, v) in lane.iter().enumerate() {
                data[base + j * inner] = *v;
            }
        }
    }
    Ok(Tensor { dims: t.dims.clone(), data })
}

pub fn softmax(t: &Tensor, axis: AxisLabel) -> Result<Tensor, TensorError> {
    map_lanes(t, axis, softmax_slice)
}

/// Normalizes each lane along `axis` to zero mean and unit (biased) variance,
/// then applies `gamma`/`beta`, both shaped `[(axis, extent)]`.
pub fn layer_norm(
    t: &Tensor,
    axis: AxisLabel,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor, TensorError> {
    let extent = t.extent(axis)?;
    let want = [(axis, extent)];
    if gamma.dims[..] != want[..] || beta.dims[..] != want[..] {
        return Err(TensorError::ShapeMismatch(format!(
            "layer_norm affine params must be {}, got {} and {}",
            format_dims(&want),
            format_dims(&gamma.dims),
            format_dims(&beta.dims)
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::InvalidShape(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let n = extent as f64;
    map_lanes(t, axis, |lane| {
        let mean = lane.iter().sum::<f64>() / n;
        let var = lane.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + eps);
        for (j, x) in lane.iter_mut().enumerate() {
            *x = (*x - mean) * inv * gamma.data[j] + beta.data[j];
        }
    })
}

/// Relative L∞ error: `max|a - b| / max|b|`. When `b` is identically zero the
/// absolute error is returned instead.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    same_dims(a, b, "max_rel_err")?;
    let num = a.data.iter().zip(&b.data).map(|(x, y)| libm::fabs(x - y)).fold(0.0, f64::max);
    let den = b.data.iter().map(|y| libm::fabs(*y)).fold(0.0, f64::max);
    Ok(if den > 0.0 { num / den } else { num })
}

#[cfg(test)]
mod tests {
    use super::*;
    use AxisLabel::*;
    use proptest::prelude::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![(Temporal, rows), (Spatial, cols)], data.to_vec()).unwrap()
    }

    #[test]
    fn fill_seeded_deterministic_and_in_range() {
        let a = fill_seeded(vec![(Temporal, 2)], 11).unwrap();
        let b = fill_seeded(vec![(Temporal, 2)], 11).unwrap();
        assert_eq!(a.data(), b.data());
        let big = fill_seeded(vec![(Batch, 64), (Hidden, 64)], 3).unwrap();
        assert!(big.data().iter().all(|&x| (-0.1..0.1).contains(&x)));
    }

    #[test]
    fn fill_seeded_seed_changes_values() {
        // splitmix64(1, 0) and splitmix64(2, 0) differ, so element 0 differs.
        assert_ne!(splitmix64(1, 0), splitmix64(2, 0));
        let a = fill_seeded(vec![(Temporal, 2)], 1).unwrap();
        let b = fill_seeded(vec![(Temporal, 2)], 2).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn splitmix_reference_vector() {
        // Published SplitMix64 output for seed 0: 0xE220A8397B1DCDAF.
        assert_eq!(splitmix64(0, 0), 0xE220_A839_7B1D_CDAF);
    }

    #[test]
    fn unit_to_range_extremes() {
        assert_eq!(unit_to_range(0), -0.1);
        assert!(unit_to_range(u64::MAX) < 0.1);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            fill_seeded(vec![(Temporal, 0)], 1),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(Tensor::zeros(vec![(Temporal, 2), (Temporal, 2)]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let t = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = permute(&t, &[Spatial, Temporal]).unwrap();
        assert_eq!(p.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(p.dims(), &[(Spatial, 2), (Temporal, 2)]);
        assert_eq!(permute(&t, &[Temporal, Spatial]).unwrap(), t);
    }

    #[test]
    fn permute_rejects_bad_orders() {
        let t = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(permute(&t, &[Spatial, Spatial]), Err(TensorError::InvalidPermutation(_))));
        assert!(matches!(permute(&t, &[Spatial, Hidden]), Err(TensorError::InvalidPermutation(_))));
        assert!(matches!(permute(&t, &[Spatial]), Err(TensorError::InvalidPermutation(_))));
    }

    #[test]
    fn split_chunks_in_order() {
        let t = Tensor::new(vec![(Temporal, 4)], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let parts = split(&t, Temporal, 2).unwrap();
        assert_eq!(parts[0].data(), &[1.0, 2.0]);
        assert_eq!(parts[1].data(), &[3.0, 4.0]);
        assert_eq!(split(&t, Temporal, 1).unwrap(), vec![t.clone()]);
        assert!(matches!(split(&t, Temporal, 3), Err(TensorError::Divisibility { .. })));
    }

    #[test]
    fn split_inner_axis() {
        let t = t2(2, 4, &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let parts = split(&t, Spatial, 2).unwrap();
        assert_eq!(parts[0].data(), &[0., 1., 4., 5.]);
        assert_eq!(parts[1].data(), &[2., 3., 6., 7.]);
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::new(vec![(Batch, 2), (Temporal, 2)], vec![1., 0., 0., 1.]).unwrap();
        let a = t2(2, 2, &[1., 2., 3., 4.]);
        let out = matmul(&eye, &a, Temporal).unwrap();
        assert_eq!(out.data(), a.data());
        assert_eq!(out.dims(), &[(Batch, 2), (Spatial, 2)]);
    }

    #[test]
    fn matmul_small_product() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::new(vec![(Batch, 2), (Hidden, 2)], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![(Hidden, 2), (MlpHidden, 2)], vec![5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&a, &b, Hidden).unwrap().data(), &[19., 22., 43., 50.]);
        let c = Tensor::new(vec![(Hidden, 3), (MlpHidden, 1)], vec![1., 1., 1.]).unwrap();
        assert!(matches!(matmul(&a, &c, Hidden), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(matmul(&a, &c, Temporal), Err(TensorError::MissingAxis(Temporal))));
    }

    #[test]
    fn add_requires_same_dims() {
        let a = t2(1, 2, &[1., 2.]);
        let b = Tensor::new(vec![(Spatial, 2), (Temporal, 1)], vec![1., 2.]).unwrap();
        assert!(matches!(add(&a, &b), Err(TensorError::ShapeMismatch(_))));
        assert_eq!(add(&a, &a).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn softmax_symmetric() {
        let t = Tensor::new(vec![(Spatial, 2)], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax(&t, Spatial).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let t = t2(2, 3, &[0.1, -2.0, 3.0, 0.7, 5.0, -1.0]);
        let s = softmax(&t, Temporal).unwrap();
        for col in 0..3 {
            let sum = s.data()[col] + s.data()[3 + col];
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gelu_known_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // tanh-GELU(1) = 0.5·(1 + tanh(0.7978845608·1.044715)) = 0.8411919906082768
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-15);
        assert!((gelu_scalar(-1.0) + 0.158_808_009_391_723_2).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_moments() {
        let t = fill_seeded(vec![(Batch, 5), (Hidden, 16)], 9).unwrap();
        let g = Tensor::filled(vec![(Hidden, 16)], 1.0).unwrap();
        let b = Tensor::zeros(vec![(Hidden, 16)]).unwrap();
        let y = layer_norm(&t, Hidden, &g, &b, 1e-300).unwrap();
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-10, "var {var}");
        }
        assert!(layer_norm(&t, Hidden, &g, &b, 0.0).is_err());
        let short = Tensor::zeros(vec![(Hidden, 8)]).unwrap();
        assert!(matches!(layer_norm(&t, Hidden, &short, &b, 1e-5), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn max_rel_err_cases() {
        let t = fill_seeded(vec![(Temporal, 3)], 4).unwrap();
        assert_eq!(max_rel_err(&t, &t).unwrap(), 0.0);
        let a = Tensor::new(vec![(Temporal, 2)], vec![1.0, 2.5]).unwrap();
        let b = Tensor::new(vec![(Temporal, 2)], vec![1.0, 2.0]).unwrap();
        assert_eq!(max_rel_err(&a, &b).unwrap(), 0.25);
    }

    fn arb_tensor() -> impl Strategy<Value = (Tensor, u64)> {
        (1usize..4, 1usize..5, 1usize..4, any::<u64>()).prop_map(|(b, t, d, seed)| {
            (fill_seeded(vec![(Batch, b), (Temporal, t * 2), (Hidden, d)], seed).unwrap(), seed)
        })
    }

    proptest! {
        #[test]
        fn split_concat_round_trip((t, _) in arb_tensor(), axis_pick in 0usize..3) {
            let axis = [Batch, Temporal, Hidden][axis_pick];
            let extent = t.extent(axis).unwrap();
            for parts in (1..=extent).filter(|p| extent % p == 0) {
                let pieces = split(&t, axis, parts).unwrap();
                prop_assert_eq!(concat(&pieces, axis).unwrap(), t.clone());
            }
        }

        #[test]
        fn permute_inverse_and_multiset((t, _) in arb_tensor(), which in 0usize..6) {
            let orders = [
                [Batch, Temporal, Hidden], [Batch, Hidden, Temporal], [Temporal, Batch, Hidden],
                [Temporal, Hidden, Batch], [Hidden, Batch, Temporal], [Hidden, Temporal, Batch],
            ];
            let p = permute(&t, &orders[which]).unwrap();
            let back = permute(&p, &t.labels()).unwrap();
            prop_assert_eq!(&back, &t);
            let mut x = t.data().to_vec();
            let mut y = p.data().to_vec();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            prop_assert_eq!(x, y);
        }

        #[test]
        fn softmax_rows_normalized((t, _) in arb_tensor()) {
            let s = softmax(&t, Temporal).unwrap();
            prop_assert!(s.data().iter().all(|&x| x >= 0.0));
            let summed = split(&s, Temporal, t.extent(Temporal).unwrap()).unwrap()
                .iter()
                .fold(None::<Tensor>, |acc, p| Some(match acc { None => p.clone(), Some(a) => add(&a, p).unwrap() }))
                .unwrap();
            prop_assert!(summed.data().iter().all(|x| (x - 1.0).abs() <= 1e-12));
        }

        #[test]
        fn ops_are_deterministic((t, _) in arb_tensor()) {
            let g = Tensor::filled(vec![(Hidden, t.extent(Hidden).unwrap())], 1.1).unwrap();
            let b = Tensor::filled(vec![(Hidden, t.extent(Hidden).unwrap())], 0.2).unwrap();
            let run = |t: &Tensor| gelu(&layer_norm(&softmax(t, Temporal).unwrap(), Hidden, &g, &b, 1e-5).unwrap());
            let (x, y) = (run(&t), run(&t));
            prop_assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
