//! Structural layers: feed-forward blocks, patch embedding, patch merging
//! and the classifier head.
//!
//! All maps are `[B, H, W, C]` with channels innermost; every layer comes as
//! a `*_forward` / `*_forward_cached` / `*_backward_with_cache` triple, where
//! the plain backward recomputes the cache itself. Gradients are returned in
//! a container of the same type as the parameters.

use crate::error::{shape_err, Result};
use crate::tensor::{
    gelu, gelu_grad, global_avg_pool, global_avg_pool_backward, layer_norm_cached,
    layer_norm_backward, matmul, transpose2, LnCache, RealTensor,
};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

// ── Shared dense-layer plumbing ───────────────────────────────────────────

/// `y = x . w (+ b)` applied to each row along the last axis.
pub(crate) fn linear_rows(x: &RealTensor, w: &RealTensor, b: Option<&RealTensor>) -> Result<RealTensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        let cols = b.len();
        for row in y.data_mut().chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Backward of [`linear_rows`]: returns `(dx, dw, db)`, with `db` summed
/// over all rows.
pub(crate) fn linear_rows_backward(
    x: &RealTensor,
    w: &RealTensor,
    grad_out: &RealTensor,
) -> Result<(RealTensor, RealTensor, RealTensor)> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let dx = matmul(grad_out, &transpose2(w)?)?;
    let mut dw = RealTensor::zeros(&[cin, cout]);
    let mut db = RealTensor::zeros(&[cout]);
    for (x_row, g_row) in x.data().chunks(cin).zip(grad_out.data().chunks(cout)) {
        for (ci, &xv) in x_row.iter().enumerate() {
            let w_row = &mut dw.data_mut()[ci * cout..(ci + 1) * cout];
            for (wg, &gv) in w_row.iter_mut().zip(g_row) {
                *wg += xv * gv;
            }
        }
        for (bg, &gv) in db.data_mut().iter_mut().zip(g_row) {
            *bg += gv;
        }
    }
    Ok((dx, dw, db))
}

// ── Feed-forward block ────────────────────────────────────────────────────

/// Two-layer MLP with a GELU in between, applied per token.
#[derive(Debug, Clone)]
pub struct FfnParams {
    /// `[C, ratio*C]`.
    pub w1: RealTensor,
    /// `[ratio*C]`.
    pub b1: RealTensor,
    /// `[ratio*C, C]`.
    pub w2: RealTensor,
    /// `[C]`.
    pub b2: RealTensor,
}

impl FfnParams {
    pub fn zeros(channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            shape_err!("feed-forward expansion ratio must be at least 1");
        }
        let hidden = channels * ratio;
        Ok(FfnParams {
            w1: RealTensor::zeros(&[channels, hidden]),
            b1: RealTensor::zeros(&[hidden]),
            w2: RealTensor::zeros(&[hidden, channels]),
            b2: RealTensor::zeros(&[channels]),
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

pub struct FfnCache {
    /// Pre-GELU activations, same rows as the input, `ratio*C` columns.
    hidden_pre: RealTensor,
}

/// `y = w2 . gelu(w1 . x + b1) + b2` along the last axis.
pub fn ffn_forward(x: &RealTensor, p: &FfnParams) -> Result<RealTensor> {
    Ok(ffn_forward_cached(x, p)?.0)
}

pub fn ffn_forward_cached(x: &RealTensor, p: &FfnParams) -> Result<(RealTensor, FfnCache)> {
    let hidden_pre = linear_rows(x, &p.w1, Some(&p.b1))?;
    let mut act = hidden_pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let y = linear_rows(&act, &p.w2, Some(&p.b2))?;
    Ok((y, FfnCache { hidden_pre }))
}

pub fn ffn_backward(
    x: &RealTensor,
    p: &FfnParams,
    grad_out: &RealTensor,
) -> Result<(RealTensor, FfnParams)> {
    let (_, cache) = ffn_forward_cached(x, p)?;
    ffn_backward_with_cache(x, p, grad_out, &cache)
}

pub fn ffn_backward_with_cache(
    x: &RealTensor,
    p: &FfnParams,
    grad_out: &RealTensor,
    cache: &FfnCache,
) -> Result<(RealTensor, FfnParams)> {
    if grad_out.shape() != x.shape() {
        shape_err!(
            "feed-forward grad {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        );
    }
    let mut act = cache.hidden_pre.clone();
    for v in act.data_mut() {
        *v = gelu(*v);
    }
    let (dact, dw2, db2) = linear_rows_backward(&act, &p.w2, grad_out)?;
    let mut dhidden = dact;
    for (v, &pre) in dhidden.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
        *v *= gelu_grad(pre);
    }
    let (dx, dw1, db1) = linear_rows_backward(x, &p.w1, &dhidden)?;
    Ok((
        dx,
        FfnParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    ))
}

// ── Patch embedding ───────────────────────────────────────────────────────

/// Non-overlapping `P x P` patches, linearly projected and layer-normed.
#[derive(Debug, Clone)]
pub struct PatchEmbedParams {
    /// `[P*P*Cin, D]`.
    pub w: RealTensor,
    /// `[D]`.
    pub b: RealTensor,
    /// `[D]` norm scale.
    pub gamma: RealTensor,
    /// `[D]` norm shift.
    pub beta: RealTensor,
    pub patch: usize,
}

impl PatchEmbedParams {
    pub fn zeros(patch: usize, in_channels: usize, dim: usize) -> Result<Self> {
        if patch == 0 || in_channels == 0 || dim == 0 {
            shape_err!("patch embedding needs positive patch size, channels and width");
        }
        Ok(PatchEmbedParams {
            w: RealTensor::zeros(&[patch * patch * in_channels, dim]),
            b: RealTensor::zeros(&[dim]),
            gamma: RealTensor::zeros(&[dim]),
            beta: RealTensor::zeros(&[dim]),
            patch,
        })
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len() + self.gamma.len() + self.beta.len()
    }
}

pub struct PatchEmbedCache {
    /// `[B, H/P, W/P, P*P*Cin]` flattened patches.
    patches: RealTensor,
    ln: LnCache,
}

/// Reorders `[B, H, W, Cin]` into flattened `P x P` patches,
/// `[B, H/P, W/P, P*P*Cin]`, pixels row-major with channels innermost.
pub(crate) fn extract_patches(img: &RealTensor, patch: usize) -> Result<RealTensor> {
    if img.rank() != 4 {
        shape_err!("patch embedding expects [B, H, W, C], got {:?}", img.shape());
    }
    let (b, h, w, cin) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        shape_err!("{h}x{w} image is not divisible into {patch}x{patch} patches");
    }
    let (ph, pw) = (h / patch, w / patch);
    let cols = patch * patch * cin;
    let mut out = RealTensor::zeros(&[b, ph, pw, cols]);
    for bi in 0..b {
        for i in 0..ph {
            for j in 0..pw {
                let dst = out.at4(bi, i, j, 0);
                for pr in 0..patch {
                    for pc in 0..patch {
                        let src = img.at4(bi, i * patch + pr, j * patch + pc, 0);
                        let off = dst + (pr * patch + pc) * cin;
                        out.data_mut()[off..off + cin]
                            .copy_from_slice(&img.data()[src..src + cin]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `[B, H, W, Cin] -> [B, H/P, W/P, D]`: flatten patches, project, norm.
pub fn embed_forward(img: &RealTensor, p: &PatchEmbedParams) -> Result<RealTensor> {
    Ok(embed_forward_cached(img, p)?.0)
}

pub fn embed_forward_cached(
    img: &RealTensor,
    p: &PatchEmbedParams,
) -> Result<(RealTensor, PatchEmbedCache)> {
    let patches = extract_patches(img, p.patch)?;
    if patches.shape()[3] != p.w.shape()[0] {
        shape_err!(
            "patch embedding weights expect {} inputs per patch, got {}",
            p.w.shape()[0],
            patches.shape()[3]
        );
    }
    let projected = linear_rows(&patches, &p.w, Some(&p.b))?;
    let (y, ln) = layer_norm_cached(&projected, &p.gamma, &p.beta, LN_EPS)?;
    Ok((y, PatchEmbedCache { patches, ln }))
}

pub fn embed_backward(
    img: &RealTensor,
    p: &PatchEmbedParams,
    grad_out: &RealTensor,
) -> Result<(RealTensor, PatchEmbedParams)> {
    let (_, cache) = embed_forward_cached(img, p)?;
    embed_backward_with_cache(img, p, grad_out, &cache)
}

pub fn embed_backward_with_cache(
    img: &RealTensor,
    p: &PatchEmbedParams,
    grad_out: &RealTensor,
    cache: &PatchEmbedCache,
) -> Result<(RealTensor, PatchEmbedParams)> {
    let (dproj, dgamma, dbeta) = layer_norm_backward(&cache.ln, &p.gamma, grad_out)?;
    let (dpatches, dw, db) = linear_rows_backward(&cache.patches, &p.w, &dproj)?;

    // Scatter patch gradients back onto image pixels.
    let patch = p.patch;
    let (b, h, w, cin) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
    let (ph, pw) = (h / patch, w / patch);
    let mut dimg = RealTensor::zeros(&[b, h, w, cin]);
    for bi in 0..b {
        for i in 0..ph {
            for j in 0..pw {
                let src = dpatches.at4(bi, i, j, 0);
                for pr in 0..patch {
                    for pc in 0..patch {
                        let dst = dimg.at4(bi, i * patch + pr, j * patch + pc, 0);
                        let off = src + (pr * patch + pc) * cin;
                        dimg.data_mut()[dst..dst + cin]
                            .copy_from_slice(&dpatches.data()[off..off + cin]);
                    }
                }
            }
        }
    }
    Ok((
        dimg,
        PatchEmbedParams {
            w: dw,
            b: db,
            gamma: dgamma,
            beta: dbeta,
            patch,
        },
    ))
}

// ── Patch merging ─────────────────────────────────────────────────────────

/// Downsampling between stages: concatenate each 2x2 neighbourhood, norm,
/// then project `4C -> 2C` without bias.
#[derive(Debug, Clone)]
pub struct PatchMergeParams {
    /// `[4C]` norm scale.
    pub gamma: RealTensor,
    /// `[4C]` norm shift.
    pub beta: RealTensor,
    /// `[4C, 2C]`, no bias.
    pub w: RealTensor,
}

impl PatchMergeParams {
    pub fn zeros(channels: usize) -> Self {
        PatchMergeParams {
            gamma: RealTensor::zeros(&[4 * channels]),
            beta: RealTensor::zeros(&[4 * channels]),
            w: RealTensor::zeros(&[4 * channels, 2 * channels]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len() + self.w.len()
    }
}

pub struct PatchMergeCache {
    /// `[B, H/2, W/2, 4C]` concatenated neighbourhoods.
    concat: RealTensor,
    /// Normed concat (input of the projection).
    normed: RealTensor,
    ln: LnCache,
}

/// Concatenates 2x2 neighbourhoods of `[B, H, W, C]` in the order
/// (0,0), (0,1), (1,0), (1,1) into `[B, H/2, W/2, 4C]`.
pub(crate) fn merge_concat(x: &RealTensor) -> Result<RealTensor> {
    if x.rank() != 4 {
        shape_err!("patch merging expects [B, H, W, C], got {:?}", x.shape());
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        shape_err!("{h}x{w} map cannot be merged 2x2");
    }
    let mut out = RealTensor::zeros(&[b, h / 2, w / 2, 4 * c]);
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let dst = out.at4(bi, i, j, 0);
                for (n, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let src = x.at4(bi, 2 * i + di, 2 * j + dj, 0);
                    out.data_mut()[dst + n * c..dst + (n + 1) * c]
                        .copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
    }
    Ok(out)
}

/// `[B, H, W, C] -> [B, H/2, W/2, 2C]`.
pub fn merge_forward(x: &RealTensor, p: &PatchMergeParams) -> Result<RealTensor> {
    Ok(merge_forward_cached(x, p)?.0)
}

pub fn merge_forward_cached(
    x: &RealTensor,
    p: &PatchMergeParams,
) -> Result<(RealTensor, PatchMergeCache)> {
    let concat = merge_concat(x)?;
    if concat.shape()[3] != p.w.shape()[0] {
        shape_err!(
            "merge weights expect {} concatenated channels, got {}",
            p.w.shape()[0],
            concat.shape()[3]
        );
    }
    let (normed, ln) = layer_norm_cached(&concat, &p.gamma, &p.beta, LN_EPS)?;
    let y = linear_rows(&normed, &p.w, None)?;
    Ok((y, PatchMergeCache { concat, normed, ln }))
}

pub fn merge_backward(
    x: &RealTensor,
    p: &PatchMergeParams,
    grad_out: &RealTensor,
) -> Result<(RealTensor, PatchMergeParams)> {
    let (_, cache) = merge_forward_cached(x, p)?;
    merge_backward_with_cache(x, p, grad_out, &cache)
}

pub fn merge_backward_with_cache(
    _x: &RealTensor, // unused (the cache carries everything) but keeps the signature aligned
    p: &PatchMergeParams,
    grad_out: &RealTensor,
    cache: &PatchMergeCache,
) -> Result<(RealTensor, PatchMergeParams)> {
    let (dnormed, dw, _no_bias) = linear_rows_backward(&cache.normed, &p.w, grad_out)?;
    let (dconcat, dgamma, dbeta) = layer_norm_backward(&cache.ln, &p.gamma, &dnormed)?;

    let (b, h2, w2, c4) = (
        cache.concat.shape()[0],
        cache.concat.shape()[1],
        cache.concat.shape()[2],
        cache.concat.shape()[3],
    );
    let c = c4 / 4;
    let mut dx = RealTensor::zeros(&[b, h2 * 2, w2 * 2, c]);
    for bi in 0..b {
        for i in 0..h2 {
            for j in 0..w2 {
                let src = dconcat.at4(bi, i, j, 0);
                for (n, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let dst = dx.at4(bi, 2 * i + di, 2 * j + dj, 0);
                    dx.data_mut()[dst..dst + c]
                        .copy_from_slice(&dconcat.data()[src + n * c..src + (n + 1) * c]);
                }
            }
        }
    }
    Ok((
        dx,
        PatchMergeParams {
            gamma: dgamma,
            beta: dbeta,
            w: dw,
        },
    ))
}

// ── Classifier head ───────────────────────────────────────────────────────

/// Final norm, global average pool, and the linear classifier.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// `[C]` norm scale.
    pub gamma: RealTensor,
    /// `[C]` norm shift.
    pub beta: RealTensor,
    /// `[C, classes]`.
    pub w: RealTensor,
    /// `[classes]`.
    pub b: RealTensor,
}

impl HeadParams {
    pub fn zeros(channels: usize, classes: usize) -> Self {
        HeadParams {
            gamma: RealTensor::zeros(&[channels]),
            beta: RealTensor::zeros(&[channels]),
            w: RealTensor::zeros(&[channels, classes]),
            b: RealTensor::zeros(&[classes]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len() + self.w.len() + self.b.len()
    }
}

pub struct HeadCache {
    ln: LnCache,
    /// `[B, C]` pooled normed features.
    pooled: RealTensor,
    height: usize,
    width: usize,
}

/// `[B, H, W, C] -> [B, classes]` logits.
pub fn head_forward(x: &RealTensor, p: &HeadParams) -> Result<RealTensor> {
    Ok(head_forward_cached(x, p)?.0)
}

pub fn head_forward_cached(x: &RealTensor, p: &HeadParams) -> Result<(RealTensor, HeadCache)> {
    if x.rank() != 4 {
        shape_err!("classifier head expects [B, H, W, C], got {:?}", x.shape());
    }
    let (normed, ln) = layer_norm_cached(x, &p.gamma, &p.beta, LN_EPS)?;
    let pooled = global_avg_pool(&normed)?;
    let logits = linear_rows(&pooled, &p.w, Some(&p.b))?;
    Ok((
        logits,
        HeadCache {
            ln,
            pooled,
            height: x.shape()[1],
            width: x.shape()[2],
        },
    ))
}

pub fn head_backward(
    x: &RealTensor,
    p: &HeadParams,
    grad_logits: &RealTensor,
) -> Result<(RealTensor, HeadParams)> {
    let (_, cache) = head_forward_cached(x, p)?;
    head_backward_with_cache(x, p, grad_logits, &cache)
}

// `_x` is unused (the cache carries everything) but keeps the signature
// aligned with the other layers.
pub fn head_backward_with_cache(
    _x: &RealTensor,
    p: &HeadParams,
    grad_logits: &RealTensor,
    cache: &HeadCache,
) -> Result<(RealTensor, HeadParams)> {
    let (dpooled, dw, db) = linear_rows_backward(&cache.pooled, &p.w, grad_logits)?;
    let dnormed = global_avg_pool_backward(&dpooled, cache.height, cache.width)?;
    let (dx, dgamma, dbeta) = layer_norm_backward(&cache.ln, &p.gamma, &dnormed)?;
    Ok((
        dx,
        HeadParams {
            gamma: dgamma,
            beta: dbeta,
            w: dw,
            b: db,
        },
    ))
}

// ── Tests ─────────────────────────────────────────────────────────────────
