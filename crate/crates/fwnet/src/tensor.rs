//! Dense row-major tensors and the pointwise/linear operations the model is
//! built from.
//!
//! Conventions used throughout the crate:
//! - storage is `f64` (`Complex64` for spectra), row-major, last axis fastest;
//! - feature maps are rank-4 `[batch, height, width, channels]`;
//! - operations return fresh tensors; nothing aliases its inputs;
//! - every operation is single-threaded and deterministic, so identical
//!   inputs produce bitwise-identical outputs.

use num_complex::Complex64;

use crate::error::{shape_err, FwError, Result};

// ── Real tensors ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            shape_err!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            );
        }
        Ok(RealTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        RealTensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            shape_err!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.data.len(),
                shape,
                expect
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Flat offset of a rank-4 index; used by the feature-map code paths.
    #[inline]
    pub fn at4(&self, b: usize, i: usize, j: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((b * self.shape[1] + i) * self.shape[2] + j) * self.shape[3] + c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Complex64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            shape_err!(
                "complex tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            );
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }
}

// ── Linear algebra ────────────────────────────────────────────────────────

/// Batched matrix product.
///
/// `a` is `[.., p, q]` and `b` is `[.., q, r]`; the leading batch axes must
/// either match exactly or be absent on one side (that operand is then reused
/// for every batch). Accumulation order is fixed (k-major), so results are
/// deterministic.
pub fn matmul(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    if a.rank() < 2 || b.rank() < 2 {
        shape_err!(
            "matmul needs rank >= 2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    }
    let (p, qa) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
    let (qb, r) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
    if qa != qb {
        shape_err!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    }
    let a_batch = &a.shape[..a.rank() - 2];
    let b_batch = &b.shape[..b.rank() - 2];
    let out_batch: Vec<usize> = if a_batch == b_batch {
        a_batch.to_vec()
    } else if b_batch.is_empty() {
        a_batch.to_vec()
    } else if a_batch.is_empty() {
        b_batch.to_vec()
    } else {
        shape_err!(
            "matmul batch axes disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    };
    let batches: usize = out_batch.iter().product();
    let mut out_shape = out_batch;
    out_shape.push(p);
    out_shape.push(r);
    let mut out = vec![0.0; batches * p * r];

    let q = qa;
    for n in 0..batches {
        let a_off = if a_batch.is_empty() { 0 } else { n * p * q };
        let b_off = if b_batch.is_empty() { 0 } else { n * q * r };
        let o_off = n * p * r;
        for i in 0..p {
            let a_row = &a.data[a_off + i * q..a_off + (i + 1) * q];
            let o_row = &mut out[o_off + i * r..o_off + (i + 1) * r];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b.data[b_off + k * r..b_off + (k + 1) * r];
                for (o, &bkj) in o_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        }
    }
    RealTensor::from_vec(&out_shape, out)
}

/// Transpose of a rank-2 tensor.
pub fn transpose2(x: &RealTensor) -> Result<RealTensor> {
    if x.rank() != 2 {
        shape_err!("transpose2 expects a matrix, got {:?}", x.shape());
    }
    let (r, c) = (x.shape[0], x.shape[1]);
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data[i * c + j];
        }
    }
    RealTensor::from_vec(&[c, r], out)
}

// ── Pointwise nonlinearities ──────────────────────────────────────────────

/// Exact (Gaussian CDF) GELU: `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    x * normal_pdf(x) + normal_cdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Numerically safe logistic sigmoid; saturates cleanly at +/- inf.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Softmax ───────────────────────────────────────────────────────────────

/// Softmax over the last axis, max-subtracted for stability.
/// Each row of the result is non-negative and sums to 1.
pub fn softmax_lastaxis(x: &RealTensor) -> RealTensor {
    let cols = *x.shape.last().expect("softmax needs rank >= 1");
    let mut out = x.data.clone();
    if cols == 0 {
        return RealTensor {
            shape: x.shape.clone(),
            data: out,
        };
    }
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    RealTensor {
        shape: x.shape.clone(),
        data: out,
    }
}

/// Backward of softmax over the last axis, given the forward output `probs`.
/// Row-wise: `dz = p .* (dp - sum(dp .* p))`.
pub fn softmax_backward(probs: &RealTensor, grad_out: &RealTensor) -> Result<RealTensor> {
    if probs.shape != grad_out.shape {
        shape_err!(
            "softmax_backward shapes disagree: {:?} vs {:?}",
            probs.shape(),
            grad_out.shape()
        );
    }
    let cols = *probs.shape.last().unwrap();
    let mut out = vec![0.0; probs.len()];
    for ((p_row, g_row), o_row) in probs
        .data
        .chunks(cols)
        .zip(grad_out.data.chunks(cols))
        .zip(out.chunks_mut(cols))
    {
        let dot: f64 = p_row.iter().zip(g_row).map(|(p, g)| p * g).sum();
        for ((o, &p), &g) in o_row.iter_mut().zip(p_row).zip(g_row) {
            *o = p * (g - dot);
        }
    }
    RealTensor::from_vec(probs.shape(), out)
}

// ── Layer norm ────────────────────────────────────────────────────────────

/// Intermediates kept by [`layer_norm_cached`] for the backward pass.
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub cols: usize,
}

/// Layer normalization over the last axis with learned scale and shift:
/// `y = gamma .* (x - mean) / sqrt(var + eps) + beta` (biased variance).
pub fn layer_norm(x: &RealTensor, gamma: &RealTensor, beta: &RealTensor, eps: f64) -> Result<RealTensor> {
    Ok(layer_norm_cached(x, gamma, beta, eps)?.0)
}

pub fn layer_norm_cached(
    x: &RealTensor,
    gamma: &RealTensor,
    beta: &RealTensor,
    eps: f64,
) -> Result<(RealTensor, LnCache)> {
    let cols = *x.shape.last().ok_or_else(|| FwError::Shape("layer_norm on rank-0 tensor".into()))?;
    if gamma.len() != cols || beta.len() != cols {
        shape_err!(
            "layer_norm params cover {} / {} channels but input has {}",
            gamma.len(),
            beta.len(),
            cols
        );
    }
    if !(eps > 0.0) {
        return Err(FwError::Arg(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.len() / cols.max(1);
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for (r, (x_row, (o_row, h_row))) in x
        .data
        .chunks(cols)
        .zip(out.chunks_mut(cols).zip(xhat.chunks_mut(cols)))
        .enumerate()
    {
        let mean = x_row.iter().sum::<f64>() / cols as f64;
        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (x_row[c] - mean) * is;
            h_row[c] = h;
            o_row[c] = gamma.data[c] * h + beta.data[c];
        }
    }
    Ok((
        RealTensor {
            shape: x.shape.clone(),
            data: out,
        },
        LnCache { xhat, inv_std, cols },
    ))
}

/// Backward of layer norm. Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    cache: &LnCache,
    gamma: &RealTensor,
    grad_out: &RealTensor,
) -> Result<(RealTensor, RealTensor, RealTensor)> {
    let cols = cache.cols;
    if *grad_out.shape.last().unwrap_or(&0) != cols || grad_out.len() != cache.xhat.len() {
        shape_err!(
            "layer_norm_backward grad shape {:?} does not match cached activations",
            grad_out.shape()
        );
    }
    let mut grad_x = vec![0.0; grad_out.len()];
    let mut grad_gamma = vec![0.0; cols];
    let mut grad_beta = vec![0.0; cols];
    let n = cols as f64;
    for (r, (g_row, (h_row, gx_row))) in grad_out
        .data
        .chunks(cols)
        .zip(cache.xhat.chunks(cols).zip(grad_x.chunks_mut(cols)))
        .enumerate()
    {
        // dL/dxhat_c = g_c * gamma_c; then the standard reduction over the row.
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for c in 0..cols {
            let dh = g_row[c] * gamma.data[c];
            sum_dh += dh;
            sum_dh_h += dh * h_row[c];
            grad_gamma[c] += g_row[c] * h_row[c];
            grad_beta[c] += g_row[c];
        }
        let is = cache.inv_std[r];
        for c in 0..cols {
            let dh = g_row[c] * gamma.data[c];
            gx_row[c] = is * (dh - sum_dh / n - h_row[c] * sum_dh_h / n);
        }
    }
    Ok((
        RealTensor::from_vec(grad_out.shape(), grad_x)?,
        RealTensor::from_vec(&[cols], grad_gamma)?,
        RealTensor::from_vec(&[cols], grad_beta)?,
    ))
}

// ── Pooling ───────────────────────────────────────────────────────────────

/// Mean over the spatial axes of a `[B, H, W, C]` map, yielding `[B, C]`.
pub fn global_avg_pool(x: &RealTensor) -> Result<RealTensor> {
    if x.rank() != 4 {
        shape_err!("global_avg_pool expects [B, H, W, C], got {:?}", x.shape());
    }
    let (b, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let hw = (h * w) as f64;
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let base = x.at4(bi, i, j, 0);
                for ci in 0..c {
                    out[bi * c + ci] += x.data[base + ci];
                }
            }
        }
        for ci in 0..c {
            out[bi * c + ci] /= hw;
        }
    }
    RealTensor::from_vec(&[b, c], out)
}

/// Backward of [`global_avg_pool`]: spreads `grad_out [B, C]` uniformly over
/// the `[B, H, W, C]` input positions.
pub fn global_avg_pool_backward(grad_out: &RealTensor, h: usize, w: usize) -> Result<RealTensor> {
    if grad_out.rank() != 2 {
        shape_err!("pool backward expects [B, C] grad, got {:?}", grad_out.shape());
    }
    let (b, c) = (grad_out.shape[0], grad_out.shape[1]);
    let hw = (h * w) as f64;
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.data[bi * c + ci] / hw;
            for i in 0..h {
                for j in 0..w {
                    out[((bi * h + i) * w + j) * c + ci] = g;
                }
            }
        }
    }
    RealTensor::from_vec(&[b, h, w, c], out)
}

// ── Tests ─────────────────────────────────────────────────────────────────
