//! Forward kernels shared by the eager API and the gradient tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, Tensor};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Boolean attention mask; `true` marks an entry that may receive weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask of {rows}x{cols} given {} entries",
                allowed.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Lower-triangular mask: row `i` may attend to columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|idx| idx % n <= idx / n).collect();
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }
}

/// Row-wise softmax. Masked entries come out as exactly `0.0`.
pub fn softmax_rows(x: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "softmax_rows expects a matrix, got {:?}",
            x.shape()
        )));
    }
    let (rows, cols) = (x.rows(), x.cols());
    if let Some(mask) = mask {
        if mask.shape() != (rows, cols) {
            return Err(Error::DimensionMismatch {
                op: "softmax_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.rows, mask.cols],
            });
        }
    }
    let allowed = |i: usize, j: usize| mask.is_none_or(|m| m.allows(i, j));
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = x.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) {
                any = true;
                max = max.max(v);
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let out_row = &mut out[i * cols..(i + 1) * cols];
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allowed(i, j) {
                let e = (v - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new([rows, cols], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-row normalization statistics kept for the backward pass.
pub(crate) struct LayerNormStats {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, LayerNormStats)> {
    let (rows, cols) = (x.rows(), x.cols());
    if gamma.len() != cols || beta.len() != cols {
        return Err(Error::DimensionMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut normalized = vec![0.0; rows * cols];
    let mut out = vec![0.0; rows * cols];
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(r);
        for j in 0..cols {
            let n = (row[j] - mean) * r;
            normalized[i * cols + j] = n;
            out[i * cols + j] = n * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormStats {
            normalized: Tensor::new(x.shape().to_vec(), normalized)?,
            rstd,
        },
    ))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    layer_norm_forward(x, gamma, beta).map(|(y, _)| y)
}

/// Sparse linear map between row sets: output row `i` is
/// `Σ w · input[j]` over its taps `(j, w)`.
///
/// Bilinear position-embedding resampling and average pooling are both
/// instances; expressing them this way gives one forward/backward pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMix {
    pub in_rows: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn out_rows(&self) -> usize {
        self.taps.len()
    }

    /// Average of each non-overlapping 2×2 neighbourhood of a row-major
    /// `rows × cols` token grid.
    pub fn avg_pool2x2(rows: usize, cols: usize) -> Result<Self> {
        check_even_grid(rows, cols)?;
        let mut taps = Vec::with_capacity(rows * cols / 4);
        for r in (0..rows).step_by(2) {
            for c in (0..cols).step_by(2) {
                taps.push(vec![
                    (r * cols + c, 0.25),
                    (r * cols + c + 1, 0.25),
                    ((r + 1) * cols + c, 0.25),
                    ((r + 1) * cols + c + 1, 0.25),
                ]);
            }
        }
        Ok(Self {
            in_rows: rows * cols,
            taps,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.in_rows {
            return Err(Error::Shape(format!(
                "row mix expects {} input rows, got {}",
                self.in_rows,
                x.rows()
            )));
        }
        let cols = x.cols();
        let mut out = vec![0.0; self.out_rows() * cols];
        for (i, taps) in self.taps.iter().enumerate() {
            let out_row = &mut out[i * cols..(i + 1) * cols];
            let mut first = true;
            for &(j, w) in taps {
                let src = x.row(j);
                if first {
                    for (o, &s) in out_row.iter_mut().zip(src) {
                        *o = w * s;
                    }
                    first = false;
                } else {
                    for (o, &s) in out_row.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        Tensor::new([self.out_rows(), cols], out)
    }

    pub(crate) fn backward(&self, grad: &Tensor) -> Tensor {
        let cols = grad.cols();
        let mut dx = vec![0.0; self.in_rows * cols];
        for (i, taps) in self.taps.iter().enumerate() {
            let g = grad.row(i);
            for &(j, w) in taps {
                for (d, &gv) in dx[j * cols..(j + 1) * cols].iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
        Tensor::new([self.in_rows, cols], dx).expect("row mix gradient shape")
    }
}

pub(crate) fn check_even_grid(rows: usize, cols: usize) -> Result<()> {
    if !rows.is_multiple_of(2) || !cols.is_multiple_of(2) || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "2x2 pooling needs an even, non-empty grid, got {rows}x{cols}"
        )));
    }
    Ok(())
}

/// Element-wise maximum over each 2×2 neighbourhood. Returns the pooled
/// tensor together with the source row chosen for every output value.
pub(crate) fn max_pool2x2(x: &Tensor, rows: usize, cols: usize) -> Result<(Tensor, Vec<usize>)> {
    check_even_grid(rows, cols)?;
    if x.rows() != rows * cols {
        return Err(Error::Shape(format!(
            "max pool expects {} rows, got {}",
            rows * cols,
            x.rows()
        )));
    }
    let d = x.cols();
    let out_rows = rows * cols / 4;
    let mut out = vec![0.0; out_rows * d];
    let mut argmax = vec![0; out_rows * d];
    let mut o = 0;
    for r in (0..rows).step_by(2) {
        for c in (0..cols).step_by(2) {
            let srcs = [
                r * cols + c,
                r * cols + c + 1,
                (r + 1) * cols + c,
                (r + 1) * cols + c + 1,
            ];
            for k in 0..d {
                let mut best = srcs[0];
                for &s in &srcs[1..] {
                    if x.row(s)[k] > x.row(best)[k] {
                        best = s;
                    }
                }
                out[o * d + k] = x.row(best)[k];
                argmax[o * d + k] = best;
            }
            o += 1;
        }
    }
    Ok((Tensor::new([out_rows, d], out)?, argmax))
}

/// Rotary frequency for pair `p` of a `head_dim`-wide head.
fn rotary_freq(p: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * p as f64 / head_dim as f64)
}

/// Cos/sin tables per position difference.
pub(crate) struct RotaryTable {
    head_dim: usize,
    base: f64,
    cache: HashMap<i64, (Vec<f64>, Vec<f64>)>,
}

impl RotaryTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary encoding needs an even head dimension, got {head_dim}"
            )));
        }
        Ok(Self {
            head_dim,
            base,
            cache: HashMap::new(),
        })
    }

    fn angles(&mut self, delta: i64) -> &(Vec<f64>, Vec<f64>) {
        let (head_dim, base) = (self.head_dim, self.base);
        self.cache.entry(delta).or_insert_with(|| {
            (0..head_dim / 2)
                .map(|p| {
                    let a = delta as f64 * rotary_freq(p, head_dim, base);
                    (a.cos(), a.sin())
                })
                .unzip()
        })
    }

    /// Rotates consecutive pairs `(v[2p], v[2p+1])` by `delta · θ_p`.
    /// `delta == 0` returns the input untouched.
    pub fn rotate(&mut self, v: &[f64], delta: i64) -> Vec<f64> {
        if delta == 0 {
            return v.to_vec();
        }
        let (cos, sin) = self.angles(delta);
        let mut out = vec![0.0; v.len()];
        for p in 0..v.len() / 2 {
            let (a, b) = (v[2 * p], v[2 * p + 1]);
            out[2 * p] = a * cos[p] - b * sin[p];
            out[2 * p + 1] = a * sin[p] + b * cos[p];
        }
        out
    }
}

fn check_rotary_inputs(q: &Tensor, k: &Tensor, pos_q: &[i64], pos_k: &[i64]) -> Result<()> {
    if q.rank() != 2 || k.rank() != 2 || q.cols() != k.cols() {
        return Err(Error::DimensionMismatch {
            op: "rotary_logits",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if pos_q.len() != q.rows() || pos_k.len() != k.rows() {
        return Err(Error::Shape(format!(
            "rotary positions ({}, {}) do not match rows ({}, {})",
            pos_q.len(),
            pos_k.len(),
            q.rows(),
            k.rows()
        )));
    }
    Ok(())
}

/// Attention logits `q_i · R(pos_q[i] − pos_k[j]) · k_jᵀ`.
///
/// The rotation is applied to the query by the position *difference*, so the
/// result depends on positions only through differences, bit for bit.
/// Entries excluded by `mask` are left at zero.
pub fn rotary_logits(
    q: &Tensor,
    k: &Tensor,
    pos_q: &[i64],
    pos_k: &[i64],
    base: f64,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    check_rotary_inputs(q, k, pos_q, pos_k)?;
    let (nq, nk) = (q.rows(), k.rows());
    let mut table = RotaryTable::new(q.cols(), base)?;
    let mut out = vec![0.0; nq * nk];
    for i in 0..nq {
        let mut rotated: HashMap<i64, Vec<f64>> = HashMap::new();
        for j in 0..nk {
            if mask.is_some_and(|m| !m.allows(i, j)) {
                continue;
            }
            let delta = pos_q[i] - pos_k[j];
            let qr = rotated
                .entry(delta)
                .or_insert_with(|| table.rotate(q.row(i), delta));
            out[i * nk + j] = dot(qr, k.row(j));
        }
    }
    Tensor::new([nq, nk], out)
}

/// Gradients of `Σ grad ⊙ rotary_logits(q, k)` with respect to `q` and `k`.
pub(crate) fn rotary_logits_backward(
    q: &Tensor,
    k: &Tensor,
    pos_q: &[i64],
    pos_k: &[i64],
    base: f64,
    mask: Option<&Mask>,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (nq, nk, d) = (q.rows(), k.rows(), q.cols());
    let mut table = RotaryTable::new(d, base)?;
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    for i in 0..nq {
        // Per distinct delta: accumulated Σ g·k_j, and the rotated query.
        let mut acc: HashMap<i64, Vec<f64>> = HashMap::new();
        let mut rotated: HashMap<i64, Vec<f64>> = HashMap::new();
        for j in 0..nk {
            if mask.is_some_and(|m| !m.allows(i, j)) {
                continue;
            }
            let g = grad.data()[i * nk + j];
            if g == 0.0 {
                continue;
            }
            let delta = pos_q[i] - pos_k[j];
            let s = acc.entry(delta).or_insert_with(|| vec![0.0; d]);
            for (sv, &kv) in s.iter_mut().zip(k.row(j)) {
                *sv += g * kv;
            }
            let qr = rotated
                .entry(delta)
                .or_insert_with(|| table.rotate(q.row(i), delta));
            for (dv, &qv) in dk[j * d..(j + 1) * d].iter_mut().zip(qr.iter()) {
                *dv += g * qv;
            }
        }
        // (R q)·s = q·(Rᵀ s) and Rᵀ(δ) = R(−δ).
        for (delta, s) in acc {
            let back = table.rotate(&s, -delta);
            for (dv, bv) in dq[i * d..(i + 1) * d].iter_mut().zip(back) {
                *dv += bv;
            }
        }
    }
    Ok((Tensor::new([nq, d], dq)?, Tensor::new([nk, d], dk)?))
}

/// Rearranges a chunk `[F, H, W, 3]` into one row per spatial `P×P` patch,
/// with columns ordered `(t, dy, dx, channel)` to match a
/// `[d, F, P, P, 3]` kernel flattened per output channel.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let &[f, h, w, ch] = frames.shape() else {
        return Err(Error::Shape(format!(
            "patchify expects [F, H, W, C], got {:?}",
            frames.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "frame extent {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = f * patch * patch * ch;
    let data = frames.data();
    let mut out = Vec::with_capacity(gh * gw * row_len);
    for py in 0..gh {
        for px in 0..gw {
            for t in 0..f {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = ((t * h + y) * w + px * patch) * ch;
                    out.extend_from_slice(&data[start..start + patch * ch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, row_len], out)
}

/// Flattens a `[d, F, P, P, 3]` kernel to `[F·P·P·3, d]` for use as the
/// right operand of a patch matmul.
pub(crate) fn kernel_matrix(kernel: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 5 {
        return Err(Error::Shape(format!(
            "conv kernel must be [d, F, P, P, C], got {:?}",
            kernel.shape()
        )));
    }
    kernel
        .clone()
        .reshape([kernel.shape()[0], kernel.cols()])?
        .transpose()
}

/// Non-overlapping spatio-temporal patch embedding. The temporal kernel
/// depth equals the chunk length, so each spatial patch yields one row:
/// `out[patch] = Σ_{t,dy,dx,c} kernel[·, t, dy, dx, c] · x[t, …] + bias`.
pub fn conv3d_patch(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let kshape = kernel.shape();
    if kshape.len() != 5
        || x.rank() != 4
        || kshape[1] != x.shape()[0]
        || kshape[4] != x.shape()[3]
        || kshape[2] != kshape[3]
    {
        return Err(Error::DimensionMismatch {
            op: "conv3d_patch",
            lhs: x.shape().to_vec(),
            rhs: kshape.to_vec(),
        });
    }
    if bias.len() != kshape[0] {
        return Err(Error::DimensionMismatch {
            op: "conv3d_patch bias",
            lhs: kshape.to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let patches = patchify(x, kshape[2])?;
    let mut out = patches.matmul(&kernel_matrix(kernel)?)?;
    let d = kshape[0];
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    debug_assert_eq!(out.cols(), d);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_row_is_uniform() {
        let x = Tensor::full([1, 4], 3.7);
        let y = softmax_rows(&x, None).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_mask_forces_mass() {
        let x = Tensor::new([1, 2], vec![0.0, 5.0]).unwrap();
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        let y = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (j, v) in y.data().iter().enumerate() {
            assert!((v - ((j + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let rounded: Vec<f64> = y.data().iter().map(|v| (v * 1e5).round() / 1e5).collect();
        assert_eq!(rounded, vec![0.09003, 0.24473, 0.66524]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let x = Tensor::zeros([2, 2]);
        let mask = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(
            softmax_rows(&x, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn causal_mask_layout() {
        let m = Mask::causal(3);
        assert!(m.allows(0, 0) && !m.allows(0, 1) && m.allows(2, 1) && !m.allows(1, 2));
    }

    #[test]
    fn single_rotation_logit() {
        let q = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let l = rotary_logits(&q, &q, &[1], &[0], 1e4, None).unwrap();
        assert!((l.data()[0] - 1f64.cos()).abs() < 1e-15);
        assert_eq!((l.data()[0] * 1e6).round() / 1e6, 0.540302);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let q = Tensor::zeros([1, 3]);
        assert!(matches!(
            rotary_logits(&q, &q, &[0], &[0], 1e4, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pool_arithmetic_mean() {
        let x = Tensor::new([4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = RowMix::avg_pool2x2(2, 2).unwrap().apply(&x).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let (m, _) = max_pool2x2(&x, 2, 2).unwrap();
        assert_eq!(m.data(), &[4.0]);
    }

    #[test]
    fn pool_rejects_odd_grid() {
        assert!(RowMix::avg_pool2x2(3, 2).is_err());
    }

    #[test]
    fn conv_rejects_indivisible_frames() {
        let x = Tensor::zeros([1, 10, 8, 3]);
        let k = Tensor::zeros([2, 1, 4, 4, 3]);
        assert!(matches!(
            conv3d_patch(&x, &k, &Tensor::zeros([2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_of_zero_is_zero() {
        let x = Tensor::zeros([2, 8, 8, 3]);
        let k = Tensor::ones([5, 2, 4, 4, 3]);
        let y = conv3d_patch(&x, &k, &Tensor::zeros([5])).unwrap();
        assert_eq!(y.shape(), &[4, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
