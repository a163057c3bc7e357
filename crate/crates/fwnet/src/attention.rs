//! Window partitioning and windowed multi-head self-attention.
//!
//! Attention here is always confined to non-overlapping `M x M` windows:
//! tokens in different windows never interact inside this layer (locality is
//! part of the test contract). A learned relative-position bias, shared
//! across windows and gathered per head from a `(2M-1)^2` table, is added to
//! the attention logits before the softmax.
//!
//! Grids that are not divisible by the window size are rejected rather than
//! padded; configurations are expected to keep every stage divisible.

use crate::error::{shape_err, Result};
use crate::tensor::{matmul, transpose2, RealTensor};

// ── Window layout ─────────────────────────────────────────────────────────

/// A feature map regrouped into attention windows: `[B * rows * cols, M*M, C]`
/// with tokens in row-major order inside each window.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub windows: RealTensor,
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
}

impl WindowGrid {
    pub fn batch(&self) -> usize {
        self.windows.shape()[0] / (self.rows * self.cols)
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }
}

/// Splits `[B, H, W, C]` into non-overlapping `m x m` windows.
pub fn window_partition(x: &RealTensor, m: usize) -> Result<WindowGrid> {
    if x.rank() != 4 {
        shape_err!("window_partition expects [B, H, W, C], got {:?}", x.shape());
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if m == 0 || h % m != 0 || w % m != 0 {
        shape_err!("{}x{} grid is not divisible into {}x{} windows", h, w, m, m);
    }
    let (rows, cols) = (h / m, w / m);
    let t = m * m;
    let mut out = RealTensor::zeros(&[b * rows * cols, t, c]);
    for bi in 0..b {
        for wr in 0..rows {
            for wc in 0..cols {
                let wi = (bi * rows + wr) * cols + wc;
                for mr in 0..m {
                    for mc in 0..m {
                        let src = x.at4(bi, wr * m + mr, wc * m + mc, 0);
                        let dst = (wi * t + mr * m + mc) * c;
                        out.data_mut()[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                    }
                }
            }
        }
    }
    Ok(WindowGrid {
        windows: out,
        rows,
        cols,
        window: m,
    })
}

/// Inverse of [`window_partition`] back onto an `h x w` grid.
pub fn window_reverse(g: &WindowGrid, h: usize, w: usize) -> Result<RealTensor> {
    let m = g.window;
    if g.rows * m != h || g.cols * m != w {
        shape_err!(
            "window grid {}x{} of {}x{} windows does not tile a {}x{} map",
            g.rows,
            g.cols,
            m,
            m,
            h,
            w
        );
    }
    let (b, t, c) = (g.batch(), m * m, g.channels());
    let mut out = RealTensor::zeros(&[b, h, w, c]);
    for bi in 0..b {
        for wr in 0..g.rows {
            for wc in 0..g.cols {
                let wi = (bi * g.rows + wr) * g.cols + wc;
                for mr in 0..m {
                    for mc in 0..m {
                        let dst = out.at4(bi, wr * m + mr, wc * m + mc, 0);
                        let src = (wi * t + mr * m + mc) * c;
                        out.data_mut()[dst..dst + c]
                            .copy_from_slice(&g.windows.data()[src..src + c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

// ── Relative position bias ────────────────────────────────────────────────

/// For every ordered token pair `(i, j)` in an `m x m` window, the flat index
/// of their relative offset `(row_j - row_i + m-1, col_j - col_i + m-1)` into
/// the `(2m-1)^2` bias table. Length `m^4`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (ri, ci) = (i / m, i % m);
        for j in 0..t {
            let (rj, cj) = (j / m, j % m);
            let dr = rj + m - 1 - ri;
            let dc = cj + m - 1 - ci;
            idx.push(dr * span + dc);
        }
    }
    idx
}

// ── Attention parameters ──────────────────────────────────────────────────

/// Weights of one windowed-attention layer. Also serves as the gradient
/// container for the layer (same shapes throughout).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// `[C, 3C]`: fused query/key/value projection.
    pub w_qkv: RealTensor,
    /// `[3C]`.
    pub b_qkv: RealTensor,
    /// `[C, C]`: output projection.
    pub w_out: RealTensor,
    /// `[C]`.
    pub b_out: RealTensor,
    /// `[(2M-1)^2, heads]`: relative-position bias table.
    pub bias_table: RealTensor,
    /// Precomputed gather index, `M^2 * M^2` entries into the table rows.
    pub rel_index: Vec<usize>,
    pub heads: usize,
    pub window: usize,
}

impl AttentionParams {
    /// Zero-valued parameters for `channels` with `heads` heads on `m x m`
    /// windows. `channels` must divide evenly into heads.
    pub fn zeros(channels: usize, heads: usize, m: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            shape_err!("{channels} channels cannot split into {heads} heads");
        }
        if m == 0 {
            shape_err!("window size must be at least 1");
        }
        let span = 2 * m - 1;
        Ok(AttentionParams {
            w_qkv: RealTensor::zeros(&[channels, 3 * channels]),
            b_qkv: RealTensor::zeros(&[3 * channels]),
            w_out: RealTensor::zeros(&[channels, channels]),
            b_out: RealTensor::zeros(&[channels]),
            bias_table: RealTensor::zeros(&[span * span, heads]),
            rel_index: relative_position_index(m),
            heads,
            window: m,
        })
    }

    pub fn zeros_like(other: &Self) -> Self {
        let mut z = Self::zeros(other.w_out.shape()[0], other.heads, other.window)
            .expect("existing params are valid");
        z.rel_index = other.rel_index.clone();
        z
    }

    pub fn channels(&self) -> usize {
        self.w_out.shape()[0]
    }

    fn check_against(&self, g: &WindowGrid) -> Result<()> {
        let t = self.window * self.window;
        if g.window != self.window || g.windows.shape()[1] != t {
            shape_err!(
                "attention params built for {}x{} windows applied to {}x{} windows",
                self.window,
                self.window,
                g.window,
                g.window
            );
        }
        if g.channels() != self.channels() {
            shape_err!(
                "attention params cover {} channels but windows carry {}",
                self.channels(),
                g.channels()
            );
        }
        Ok(())
    }
}

// ── Forward ───────────────────────────────────────────────────────────────

/// Intermediates retained for the backward pass.
pub struct WmsaCache {
    /// `[nW, T, 3C]` fused projections.
    z: Vec<f64>,
    /// `[nW, heads, T, T]` post-softmax attention.
    attn: Vec<f64>,
    /// `[nW, T, C]` concatenated per-head context, before the out projection.
    ctx: RealTensor,
}

/// Windowed multi-head self-attention over every window of `g`.
///
/// Per window and head: `softmax(Q K^T / sqrt(dh) + B) V`, where `B` is the
/// gathered relative-position bias; heads are concatenated and linearly
/// projected. Windows never mix.
pub fn wmsa_forward(g: &WindowGrid, p: &AttentionParams) -> Result<WindowGrid> {
    Ok(forward_impl(g, p, false)?.0)
}

pub fn wmsa_forward_cached(g: &WindowGrid, p: &AttentionParams) -> Result<(WindowGrid, WmsaCache)> {
    let (out, cache) = forward_impl(g, p, true)?;
    Ok((out, cache.expect("cache was requested")))
}

fn forward_impl(
    g: &WindowGrid,
    p: &AttentionParams,
    want_cache: bool,
) -> Result<(WindowGrid, Option<WmsaCache>)> {
    p.check_against(g)?;
    let (nw, t, c) = (
        g.windows.shape()[0],
        g.windows.shape()[1],
        g.windows.shape()[2],
    );
    let heads = p.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Fused QKV projection for all windows at once.
    let mut z = matmul(&g.windows, &p.w_qkv)?;
    for row in z.data_mut().chunks_mut(3 * c) {
        for (v, b) in row.iter_mut().zip(p.b_qkv.data()) {
            *v += b;
        }
    }
    let z = z.data();

    let mut ctx = RealTensor::zeros(&[nw, t, c]);
    let mut attn_cache = if want_cache {
        vec![0.0; nw * heads * t * t]
    } else {
        Vec::new()
    };
    let mut logits = vec![0.0; t];
    for w in 0..nw {
        let zw = &z[w * t * 3 * c..(w + 1) * t * 3 * c];
        for h in 0..heads {
            let (q_off, k_off, v_off) = (h * dh, c + h * dh, 2 * c + h * dh);
            for i in 0..t {
                let q = &zw[i * 3 * c + q_off..i * 3 * c + q_off + dh];
                // Bias values are gathered straight from the table; building
                // the dense [T, T] bias matrix up front would cost O(heads *
                // T^2) memory, which matters when one window spans the map.
                let ridx = &p.rel_index[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for j in 0..t {
                    let k = &zw[j * 3 * c + k_off..j * 3 * c + k_off + dh];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    let l = dot * scale + p.bias_table.data()[ridx[j] * heads + h];
                    logits[j] = l;
                    max = max.max(l);
                }
                // Softmax the row in place, then take the weighted sum of V.
                let mut sum = 0.0;
                for l in logits.iter_mut() {
                    *l = (*l - max).exp();
                    sum += *l;
                }
                let ctx_row = &mut ctx.data_mut()[(w * t + i) * c + h * dh..(w * t + i) * c + h * dh + dh];
                for j in 0..t {
                    let a = logits[j] / sum;
                    if want_cache {
                        attn_cache[((w * heads + h) * t + i) * t + j] = a;
                    }
                    let v = &zw[j * 3 * c + v_off..j * 3 * c + v_off + dh];
                    for (o, &vd) in ctx_row.iter_mut().zip(v) {
                        *o += a * vd;
                    }
                }
            }
        }
    }

    let mut out = matmul(&ctx, &p.w_out)?;
    for row in out.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(p.b_out.data()) {
            *v += b;
        }
    }
    let grid = WindowGrid {
        windows: out,
        rows: g.rows,
        cols: g.cols,
        window: g.window,
    };
    let cache = want_cache.then(|| WmsaCache {
        z: z.to_vec(),
        attn: attn_cache,
        ctx,
    });
    Ok((grid, cache))
}

// ── Backward ──────────────────────────────────────────────────────────────

/// Analytic gradients of [`wmsa_forward`]. Recomputes the forward
/// intermediates; use [`wmsa_backward_with_cache`] when they are already
/// available. Returns the gradient grid and parameter gradients.
pub fn wmsa_backward(
    g: &WindowGrid,
    p: &AttentionParams,
    grad_out: &WindowGrid,
) -> Result<(WindowGrid, AttentionParams)> {
    let (_, cache) = wmsa_forward_cached(g, p)?;
    wmsa_backward_with_cache(g, p, grad_out, &cache)
}

pub fn wmsa_backward_with_cache(
    g: &WindowGrid,
    p: &AttentionParams,
    grad_out: &WindowGrid,
    cache: &WmsaCache,
) -> Result<(WindowGrid, AttentionParams)> {
    p.check_against(g)?;
    if grad_out.windows.shape() != g.windows.shape() {
        shape_err!(
            "attention grad {:?} does not match input windows {:?}",
            grad_out.windows.shape(),
            g.windows.shape()
        );
    }
    let (nw, t, c) = (
        g.windows.shape()[0],
        g.windows.shape()[1],
        g.windows.shape()[2],
    );
    let heads = p.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = AttentionParams::zeros_like(p);

    // Out projection: y = ctx . w_out + b_out.
    let dy = &grad_out.windows;
    for (ctx_row, dy_row) in cache.ctx.data().chunks(c).zip(dy.data().chunks(c)) {
        for (ci, &cv) in ctx_row.iter().enumerate() {
            let w_row = &mut grads.w_out.data_mut()[ci * c..(ci + 1) * c];
            for (wg, &dv) in w_row.iter_mut().zip(dy_row) {
                *wg += cv * dv;
            }
        }
        for (bg, &dv) in grads.b_out.data_mut().iter_mut().zip(dy_row) {
            *bg += dv;
        }
    }
    let w_out_t = transpose2(&p.w_out)?;
    let dctx = matmul(dy, &w_out_t)?;

    // Attention core, per window and head.
    let mut dz = vec![0.0; nw * t * 3 * c];
    let mut da = vec![0.0; t];
    for w in 0..nw {
        let zw = &cache.z[w * t * 3 * c..(w + 1) * t * 3 * c];
        let dzw = &mut dz[w * t * 3 * c..(w + 1) * t * 3 * c];
        for h in 0..heads {
            let (q_off, k_off, v_off) = (h * dh, c + h * dh, 2 * c + h * dh);
            let attn = &cache.attn[(w * heads + h) * t * t..(w * heads + h + 1) * t * t];
            for i in 0..t {
                let dctx_row = &dctx.data()[(w * t + i) * c + h * dh..(w * t + i) * c + h * dh + dh];
                // dA[i][j] = dctx_i . v_j ; dV via the transpose of attn.
                let mut dot_da_a = 0.0;
                for j in 0..t {
                    let v = &zw[j * 3 * c + v_off..j * 3 * c + v_off + dh];
                    let a = attn[i * t + j];
                    let daij: f64 = dctx_row.iter().zip(v).map(|(x, y)| x * y).sum();
                    da[j] = daij;
                    dot_da_a += daij * a;
                    let dv = &mut dzw[j * 3 * c + v_off..j * 3 * c + v_off + dh];
                    for (o, &x) in dv.iter_mut().zip(dctx_row) {
                        *o += a * x;
                    }
                }
                // Softmax backward, bias-table scatter, and dQ/dK.
                let qi: Vec<f64> =
                    zw[i * 3 * c + q_off..i * 3 * c + q_off + dh].to_vec();
                let mut dq = vec![0.0; dh];
                for j in 0..t {
                    let a = attn[i * t + j];
                    let dl = a * (da[j] - dot_da_a);
                    let idx = p.rel_index[i * t + j];
                    grads.bias_table.data_mut()[idx * heads + h] += dl;
                    let k = &zw[j * 3 * c + k_off..j * 3 * c + k_off + dh];
                    for d in 0..dh {
                        dq[d] += dl * k[d] * scale;
                    }
                    let dk = &mut dzw[j * 3 * c + k_off..j * 3 * c + k_off + dh];
                    for (o, &qd) in dk.iter_mut().zip(&qi) {
                        *o += dl * qd * scale;
                    }
                }
                let dqi = &mut dzw[i * 3 * c + q_off..i * 3 * c + q_off + dh];
                for (o, d) in dqi.iter_mut().zip(dq) {
                    *o += d;
                }
            }
        }
    }

    // QKV projection: z = x . w_qkv + b_qkv.
    let dz = RealTensor::from_vec(&[nw, t, 3 * c], dz)?;
    for (x_row, dz_row) in g.windows.data().chunks(c).zip(dz.data().chunks(3 * c)) {
        for (ci, &xv) in x_row.iter().enumerate() {
            let w_row = &mut grads.w_qkv.data_mut()[ci * 3 * c..(ci + 1) * 3 * c];
            for (wg, &dv) in w_row.iter_mut().zip(dz_row) {
                *wg += xv * dv;
            }
        }
        for (bg, &dv) in grads.b_qkv.data_mut().iter_mut().zip(dz_row) {
            *bg += dv;
        }
    }
    let w_qkv_t = transpose2(&p.w_qkv)?;
    let dx = matmul(&dz, &w_qkv_t)?;

    Ok((
        WindowGrid {
            windows: dx,
            rows: g.rows,
            cols: g.cols,
            window: g.window,
        },
        grads,
    ))
}

// ── Tests ─────────────────────────────────────────────────────────────────
