//! Fourier transforms and the spectral filter layer.
//!
//! Transform conventions (matching the usual DFT definition):
//! - forward, 1D: `F[k] = sum_n f[n] * exp(-j*2*pi*k*n/N)`, unnormalized;
//! - inverse, 1D: same sum with `+j` and a `1/N` factor;
//! - 2D transforms are separable (rows then columns); the `1/(M*N)` factor
//!   sits entirely on the inverse.
//!
//! Real feature maps have conjugate-symmetric spectra, `F(M-u, N-v) =
//! conj(F(u, v))`, so [`rfft2`] stores only the first `floor(W/2)+1` columns.
//! [`irfft2`] reconstructs the dropped columns from that symmetry before
//! inverting, which keeps the round trip exact and the filter layer's output
//! real by construction.
//!
//! The fast path is a recursive mixed-radix Cooley–Tukey decimation that
//! peels the smallest prime factor at each level and falls back to a direct
//! DFT once the remaining length is prime, so any length works (the token
//! grids here are sizes like 56, 28, 14, 7 = 2^a * 7).

use num_complex::Complex64;

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::{ComplexTensor, RealTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

// ── Reference transforms ──────────────────────────────────────────────────

/// Direct quadratic-time DFT straight from the defining sum. Slow; kept as
/// the independent oracle the fast path is tested against.
pub fn dft_1d_naive(signal: &[Complex64]) -> Result<Vec<Complex64>> {
    if signal.is_empty() {
        arg_err!("dft of an empty signal");
    }
    let n = signal.len();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, &x) in signal.iter().enumerate() {
            let angle = -std::f64::consts::TAU * ((k * t) % n) as f64 / n as f64;
            acc += x * Complex64::new(angle.cos(), angle.sin());
        }
        out.push(acc);
    }
    Ok(out)
}

/// Direct inverse DFT including the `1/N` factor.
pub fn idft_1d_naive(spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
    if spectrum.is_empty() {
        arg_err!("idft of an empty spectrum");
    }
    let n = spectrum.len();
    let scale = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, &x) in spectrum.iter().enumerate() {
            let angle = std::f64::consts::TAU * ((k * t) % n) as f64 / n as f64;
            acc += x * Complex64::new(angle.cos(), angle.sin());
        }
        out.push(acc * scale);
    }
    Ok(out)
}

// ── Mixed-radix FFT ───────────────────────────────────────────────────────

fn smallest_prime_factor(n: usize) -> usize {
    if n % 2 == 0 {
        return 2;
    }
    let mut p = 3;
    while p * p <= n {
        if n % p == 0 {
            return p;
        }
        p += 2;
    }
    n
}

/// A transform plan for one length and direction: the full twiddle table is
/// computed once so the recursion does no trigonometry.
struct Fft {
    n: usize,
    twiddles: Vec<Complex64>,
}

impl Fft {
    fn new(n: usize, direction: Direction) -> Self {
        let sign = match direction {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        };
        let twiddles = (0..n)
            .map(|t| Complex64::from_polar(1.0, sign * std::f64::consts::TAU * t as f64 / n as f64))
            .collect();
        Fft { n, twiddles }
    }

    /// Unnormalized transform (callers apply the inverse 1/N factor).
    fn transform(&self, input: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(input.len(), self.n);
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.scratch_len(1)];
        self.transform_batch(input, 1, &mut out, &mut scratch);
        out
    }

    /// Scratch elements [`Self::transform_batch`] needs: one level-sized
    /// buffer per recursion level, at most `n + n/2 + n/4 + ... < 2n` lanes.
    fn scratch_len(&self, lanes: usize) -> usize {
        2 * self.n * lanes
    }

    /// Transform `lanes` interleaved signals at once. `input` and `out` hold
    /// `n * lanes` values laid out position-major (`[position][lane]`), so
    /// the butterflies run over contiguous memory; this is how the 2D
    /// transforms batch over channels. `scratch` must hold at least
    /// [`Self::scratch_len`] elements; nothing is allocated.
    fn transform_batch(
        &self,
        input: &[Complex64],
        lanes: usize,
        out: &mut [Complex64],
        scratch: &mut [Complex64],
    ) {
        debug_assert_eq!(input.len(), self.n * lanes);
        debug_assert_eq!(out.len(), self.n * lanes);
        debug_assert!(scratch.len() >= self.scratch_len(lanes));
        self.recurse(input, lanes, 1, out, scratch);
    }

    fn recurse(
        &self,
        input: &[Complex64],
        lanes: usize,
        stride: usize,
        out: &mut [Complex64],
        scratch: &mut [Complex64],
    ) {
        let n = out.len() / lanes;
        if n == 1 {
            out.copy_from_slice(&input[..lanes]);
            return;
        }
        // Twiddles live in one table of length self.n; at a level of size n
        // the k-th root of unity is table[k * (self.n / n)].
        let step = self.n / n;
        let radix = smallest_prime_factor(n);
        if radix == n {
            // Prime length: direct DFT over the strided input.
            for k in 0..n {
                let dst = &mut out[k * lanes..(k + 1) * lanes];
                dst.copy_from_slice(&input[..lanes]);
                for t in 1..n {
                    let tw = self.twiddles[(k * t) % n * step];
                    let src = &input[t * stride * lanes..t * stride * lanes + lanes];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o += s * tw;
                    }
                }
            }
            return;
        }
        // Decimate in time: `radix` interleaved sub-transforms of length m,
        // computed into this level's slice of the scratch space.
        let m = n / radix;
        let (sub, rest) = scratch.split_at_mut(n * lanes);
        for p in 0..radix {
            self.recurse(
                &input[p * stride * lanes..],
                lanes,
                stride * radix,
                &mut sub[p * m * lanes..(p + 1) * m * lanes],
                rest,
            );
        }
        for s in 0..radix {
            for q in 0..m {
                let k = s * m + q;
                let dst = &mut out[k * lanes..(k + 1) * lanes];
                dst.copy_from_slice(&sub[q * lanes..(q + 1) * lanes]);
                for p in 1..radix {
                    let tw = self.twiddles[(p * k) % n * step];
                    let src = &sub[(p * m + q) * lanes..(p * m + q + 1) * lanes];
                    for (o, &s2) in dst.iter_mut().zip(src) {
                        *o += s2 * tw;
                    }
                }
            }
        }
    }
}

/// Fast 1D transform of any length. `Inverse` includes the `1/N` factor, so
/// `fft_1d(fft_1d(x, Forward), Inverse)` is the identity up to rounding.
pub fn fft_1d(signal: &[Complex64], direction: Direction) -> Result<Vec<Complex64>> {
    if signal.is_empty() {
        arg_err!("fft of an empty signal");
    }
    let plan = Fft::new(signal.len(), direction);
    let mut out = plan.transform(signal);
    if direction == Direction::Inverse {
        let scale = 1.0 / signal.len() as f64;
        for v in &mut out {
            *v *= scale;
        }
    }
    Ok(out)
}

// ── Half-spectrum 2D transforms ───────────────────────────────────────────

pub fn half_width(width: usize) -> usize {
    width / 2 + 1
}

/// Column `v` of the half spectrum whose mirror column `W - v` was dropped.
/// Gradients through the dropped copy fold back onto these columns.
fn mirror_dropped(v: usize, width: usize) -> bool {
    let mirror = (width - v) % width;
    mirror >= half_width(width)
}

/// The spectrum of a `[B, H, W, C]` real map, stored as `[B, H, W/2+1, C]`
/// (conjugate symmetry makes the remaining columns redundant) together with
/// the original width needed to undo the halving.
#[derive(Debug, Clone)]
pub struct SpectralMap {
    data: ComplexTensor,
    original_width: usize,
}

impl SpectralMap {
    pub fn new(data: ComplexTensor, original_width: usize) -> Result<Self> {
        if data.shape().len() != 4 {
            shape_err!("spectral map must be [B, H, W/2+1, C], got {:?}", data.shape());
        }
        if original_width == 0 || data.shape()[2] != half_width(original_width) {
            shape_err!(
                "spectral map holds {} columns which is not floor({}/2)+1",
                data.shape()[2],
                original_width
            );
        }
        Ok(SpectralMap { data, original_width })
    }

    pub fn data(&self) -> &ComplexTensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut ComplexTensor {
        &mut self.data
    }

    pub fn original_width(&self) -> usize {
        self.original_width
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }
}

/// Forward 2D transform of a real `[B, H, W, C]` map, keeping the first
/// `W/2+1` frequency columns of each (batch, channel) plane.
pub fn rfft2(x: &RealTensor) -> Result<SpectralMap> {
    if x.rank() != 4 {
        shape_err!("rfft2 expects [B, H, W, C], got {:?}", x.shape());
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h == 0 || w == 0 {
        arg_err!("rfft2 on an empty spatial grid {:?}", x.shape());
    }
    let wh = half_width(w);
    let row_plan = Fft::new(w, Direction::Forward);
    let col_plan = Fft::new(h, Direction::Forward);
    let mut out = ComplexTensor::zeros(&[b, h, wh, c]);

    // All transforms batch over contiguous trailing lanes: rows carry their
    // C channels side by side, and the column pass runs once per image with
    // the whole `[W/2+1, C]` plane as its lane dimension.
    let mut row_in = vec![Complex64::new(0.0, 0.0); w * c];
    let mut row_out = vec![Complex64::new(0.0, 0.0); w * c];
    let mut row_scratch = vec![Complex64::new(0.0, 0.0); row_plan.scratch_len(c)];
    let mut plane = vec![Complex64::new(0.0, 0.0); h * wh * c];
    let mut col_scratch = vec![Complex64::new(0.0, 0.0); col_plan.scratch_len(wh * c)];
    for bi in 0..b {
        // Rows first (length W), dropping the mirrored columns early...
        for i in 0..h {
            let base = x.at4(bi, i, 0, 0);
            for (r, &v) in row_in.iter_mut().zip(&x.data()[base..base + w * c]) {
                *r = Complex64::new(v, 0.0);
            }
            row_plan.transform_batch(&row_in, c, &mut row_out, &mut row_scratch);
            plane[i * wh * c..(i + 1) * wh * c].copy_from_slice(&row_out[..wh * c]);
        }
        // ...then all retained columns (length H) in one batched transform.
        let span = h * wh * c;
        col_plan.transform_batch(
            &plane,
            wh * c,
            &mut out.data_mut()[bi * span..(bi + 1) * span],
            &mut col_scratch,
        );
    }
    SpectralMap::new(out, w)
}

/// Inverse of [`rfft2`]: completes the dropped columns by conjugate symmetry,
/// applies the full inverse transform with its `1/(H*W)` factor, and returns
/// the real part.
pub fn irfft2(s: &SpectralMap) -> Result<RealTensor> {
    let (b, h, wh, c) = (
        s.data.shape()[0],
        s.data.shape()[1],
        s.data.shape()[2],
        s.data.shape()[3],
    );
    let w = s.original_width;
    debug_assert_eq!(wh, half_width(w));
    let col_plan = Fft::new(h, Direction::Inverse);
    let row_plan = Fft::new(w, Direction::Inverse);
    let scale = 1.0 / (h * w) as f64;
    let mut out = RealTensor::zeros(&[b, h, w, c]);

    // Invert the columns of the retained half spectrum only; a dropped
    // column `W - v` is defined as the row-flipped conjugate of column `v`,
    // and the column inverse commutes with that relation, so its inverse is
    // `y[t][W-v] = conj(y[t][v])` — no need to transform it.
    let mut cols = vec![Complex64::new(0.0, 0.0); h * wh * c];
    let mut col_scratch = vec![Complex64::new(0.0, 0.0); col_plan.scratch_len(wh * c)];
    let mut row_in = vec![Complex64::new(0.0, 0.0); w * c];
    let mut row_out = vec![Complex64::new(0.0, 0.0); w * c];
    let mut row_scratch = vec![Complex64::new(0.0, 0.0); row_plan.scratch_len(c)];
    for bi in 0..b {
        let span = h * wh * c;
        col_plan.transform_batch(
            &s.data.data()[bi * span..(bi + 1) * span],
            wh * c,
            &mut cols,
            &mut col_scratch,
        );
        // Rows: complete each one by conjugate symmetry, then invert it with
        // the single 1/(H*W) factor applied on the way out.
        for t in 0..h {
            let y = &cols[t * wh * c..(t + 1) * wh * c];
            row_in[..wh * c].copy_from_slice(y);
            for v in wh..w {
                let mv = w - v; // < wh because v > W/2
                for ci in 0..c {
                    row_in[v * c + ci] = y[mv * c + ci].conj();
                }
            }
            row_plan.transform_batch(&row_in, c, &mut row_out, &mut row_scratch);
            let base = out.at4(bi, t, 0, 0);
            for (o, r) in out.data_mut()[base..base + w * c].iter_mut().zip(&row_out) {
                *o = r.re * scale;
            }
        }
    }
    Ok(out)
}

// ── Filter enhancement ────────────────────────────────────────────────────

/// Learnable complex mask over the half spectrum of one stage's feature map.
/// One weight per (row frequency, column frequency, channel).
#[derive(Debug, Clone)]
pub struct FilterWeights {
    data: ComplexTensor,
    width: usize,
}

impl FilterWeights {
    /// All-zero weights for a `height x width` grid with `channels` channels.
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FilterWeights {
            data: ComplexTensor::zeros(&[height, half_width(width), channels]),
            width,
        }
    }

    pub fn from_tensor(data: ComplexTensor, width: usize) -> Result<Self> {
        if data.shape().len() != 3 || data.shape()[1] != half_width(width) {
            shape_err!(
                "filter weights must be [H, {}/2+1, C], got {:?}",
                width,
                data.shape()
            );
        }
        Ok(FilterWeights { data, width })
    }

    pub fn data(&self) -> &ComplexTensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut ComplexTensor {
        &mut self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    fn check_against(&self, x: &RealTensor) -> Result<()> {
        if x.rank() != 4
            || x.shape()[1] != self.height()
            || x.shape()[2] != self.width
            || x.shape()[3] != self.channels()
        {
            shape_err!(
                "filter weights for {}x{}x{} maps cannot apply to input {:?}",
                self.height(),
                self.width,
                self.channels(),
                x.shape()
            );
        }
        Ok(())
    }
}

/// Spectral filtering: transform, multiply every retained bin by its weight,
/// transform back. Equivalent to a per-channel circular convolution with the
/// kernel `irfft2(weights)`.
pub fn filter_enhance_forward(x: &RealTensor, w: &FilterWeights) -> Result<RealTensor> {
    w.check_against(x)?;
    let mut spec = rfft2(x)?;
    apply_mask(&mut spec, w, false);
    irfft2(&spec)
}

/// Analytic gradients of [`filter_enhance_forward`].
///
/// Returns `(grad_x, grad_w)` where `grad_w` packs d(loss)/d(Re w) and
/// d(loss)/d(Im w) as one complex tensor (real and imaginary parts are
/// independent parameters).
///
/// Both follow from the convolution view of the layer:
/// - `grad_x` filters the output gradient with the conjugate mask;
/// - `grad_w[u,v,c] = k/(H*W) * sum_b G[b,u,v,c] * conj(X[b,u,v,c])` with
///   `k = 2` on bins whose mirror column was dropped (those weights act on
///   two bins of the full spectrum) and `k = 1` on self-mirrored columns.
pub fn filter_enhance_backward(
    x: &RealTensor,
    w: &FilterWeights,
    grad_y: &RealTensor,
) -> Result<(RealTensor, ComplexTensor)> {
    w.check_against(x)?;
    if grad_y.shape() != x.shape() {
        shape_err!(
            "output gradient {:?} does not match input {:?}",
            grad_y.shape(),
            x.shape()
        );
    }
    let (b, h, wh, c) = (
        x.shape()[0],
        w.height(),
        half_width(w.width),
        w.channels(),
    );

    let mut g_spec = rfft2(grad_y)?;
    let x_spec = rfft2(x)?;

    // grad_w before grad_x so we can reuse g_spec's buffer for the mask.
    let mut grad_w = ComplexTensor::zeros(&[h, wh, c]);
    let inv_hw = 1.0 / (h * w.width) as f64;
    for u in 0..h {
        for v in 0..wh {
            let factor = if mirror_dropped(v, w.width) { 2.0 * inv_hw } else { inv_hw };
            for ci in 0..c {
                let mut acc = Complex64::new(0.0, 0.0);
                for bi in 0..b {
                    let idx = ((bi * h + u) * wh + v) * c + ci;
                    acc += g_spec.data.data()[idx] * x_spec.data.data()[idx].conj();
                }
                grad_w.data_mut()[(u * wh + v) * c + ci] = acc * factor;
            }
        }
    }

    apply_mask(&mut g_spec, w, true);
    let grad_x = irfft2(&g_spec)?;
    Ok((grad_x, grad_w))
}

fn apply_mask(spec: &mut SpectralMap, w: &FilterWeights, conjugate: bool) {
    let (b, h, wh, c) = (
        spec.data.shape()[0],
        spec.data.shape()[1],
        spec.data.shape()[2],
        spec.data.shape()[3],
    );
    let mask = w.data.data();
    for bi in 0..b {
        let base = bi * h * wh * c;
        for (i, v) in spec.data.data_mut()[base..base + h * wh * c].iter_mut().enumerate() {
            let m = if conjugate { mask[i].conj() } else { mask[i] };
            *v *= m;
        }
    }
}

// ── Tests ─────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_signal(rng: &mut Rng, n: usize) -> Vec<Complex64> {
        (0..n).map(|_| c(rng.normal(), rng.normal())).collect()
    }

    fn random_map(rng: &mut Rng, shape: &[usize]) -> RealTensor {
        let n: usize = shape.iter().product();
        RealTensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn max_dist(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    /// Full-spectrum 2D DFT straight from the separable definition; the
    /// oracle for rfft2/irfft2.
    fn dft2_naive_full(plane: &[Complex64], h: usize, w: usize, sign: f64) -> Vec<Complex64> {
        let mut out = vec![c(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = c(0.0, 0.0);
                for m in 0..h {
                    for n in 0..w {
                        let angle = sign
                            * std::f64::consts::TAU
                            * (u as f64 * m as f64 / h as f64 + v as f64 * n as f64 / w as f64);
                        acc += plane[m * w + n] * c(angle.cos(), angle.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn dft_impulse_is_flat() {
        let x = vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        let y = dft_1d_naive(&x).unwrap();
        for &v in &y {
            assert!((v - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn dft_constant_concentrates_at_dc() {
        let x = vec![c(2.0, 0.0); 4];
        let y = dft_1d_naive(&x).unwrap();
        assert!((y[0] - c(8.0, 0.0)).norm() < 1e-12);
        for &v in &y[1..] {
            assert!(v.norm() < 1e-12, "non-DC bin should vanish, got {v}");
        }
    }

    #[test]
    fn dft_shifted_impulse_walks_the_unit_circle() {
        let x = vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        let y = dft_1d_naive(&x).unwrap();
        let expect = [c(1.0, 0.0), c(0.0, -1.0), c(-1.0, 0.0), c(0.0, 1.0)];
        for (got, want) in y.iter().zip(&expect) {
            assert!((got - want).norm() < 1e-12, "got {got}, want {want}");
        }
    }

    #[test]
    fn dft_rejects_empty_input() {
        assert!(dft_1d_naive(&[]).is_err());
        assert!(idft_1d_naive(&[]).is_err());
        assert!(fft_1d(&[], Direction::Forward).is_err());
    }

    #[test]
    fn idft_undoes_dft() {
        let mut rng = Rng::seed_from_u64(1);
        let x = random_signal(&mut rng, 8);
        let back = idft_1d_naive(&dft_1d_naive(&x).unwrap()).unwrap();
        assert!(max_dist(&x, &back) < 1e-12, "naive round trip drifted");
    }

    #[test]
    fn idft_of_dc_spectrum_is_constant_one() {
        let mut spec = vec![c(0.0, 0.0); 6];
        spec[0] = c(6.0, 0.0);
        let x = idft_1d_naive(&spec).unwrap();
        for &v in &x {
            assert!((v - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn idft_matches_conjugate_trick() {
        // IDFT(x) = conj(DFT(conj(x))) / N -- a derivation-independent check.
        let mut rng = Rng::seed_from_u64(2);
        let x = random_signal(&mut rng, 12);
        let direct = idft_1d_naive(&x).unwrap();
        let conj_in: Vec<Complex64> = x.iter().map(|v| v.conj()).collect();
        let tricked: Vec<Complex64> = dft_1d_naive(&conj_in)
            .unwrap()
            .iter()
            .map(|v| v.conj() / 12.0)
            .collect();
        assert!(max_dist(&direct, &tricked) < 1e-12);
    }

    #[test]
    fn fft_length_one_is_identity() {
        let x = vec![c(3.5, -1.25)];
        assert_eq!(fft_1d(&x, Direction::Forward).unwrap(), x);
        assert_eq!(fft_1d(&x, Direction::Inverse).unwrap(), x);
    }

    #[test]
    fn fft_matches_naive_for_all_lengths_up_to_64() {
        let mut rng = Rng::seed_from_u64(3);
        for n in 1..=64 {
            let x = random_signal(&mut rng, n);
            let fast = fft_1d(&x, Direction::Forward).unwrap();
            let slow = dft_1d_naive(&x).unwrap();
            assert!(
                max_dist(&fast, &slow) < 1e-10,
                "fft disagrees with naive dft at length {n}"
            );
        }
    }

    #[test]
    fn fft_handles_prime_and_mixed_lengths() {
        let mut rng = Rng::seed_from_u64(4);
        for &n in &[7usize, 13, 56, 112, 97] {
            let x = random_signal(&mut rng, n);
            let fast = fft_1d(&x, Direction::Forward).unwrap();
            let slow = dft_1d_naive(&x).unwrap();
            assert!(max_dist(&fast, &slow) < 1e-9, "length {n} mismatch");
            let back = fft_1d(&fast, Direction::Inverse).unwrap();
            assert!(max_dist(&back, &x) < 1e-10, "length {n} round trip drifted");
        }
    }

    #[test]
    fn fft_inverse_matches_naive_idft() {
        let mut rng = Rng::seed_from_u64(5);
        let x = random_signal(&mut rng, 24);
        let fast = fft_1d(&x, Direction::Inverse).unwrap();
        let slow = idft_1d_naive(&x).unwrap();
        assert!(max_dist(&fast, &slow) < 1e-11);
    }

    #[test]
    fn fft_is_linear() {
        let mut rng = Rng::seed_from_u64(6);
        let x = random_signal(&mut rng, 20);
        let y = random_signal(&mut rng, 20);
        let (a, b) = (1.75, -0.5);
        let combined: Vec<Complex64> = x.iter().zip(&y).map(|(xi, yi)| a * xi + b * yi).collect();
        let lhs = fft_1d(&combined, Direction::Forward).unwrap();
        let fx = fft_1d(&x, Direction::Forward).unwrap();
        let fy = fft_1d(&y, Direction::Forward).unwrap();
        let rhs: Vec<Complex64> = fx.iter().zip(&fy).map(|(xi, yi)| a * xi + b * yi).collect();
        assert!(max_dist(&lhs, &rhs) < 1e-10, "linearity violated");
    }

    #[test]
    fn fft_preserves_energy_parseval() {
        let mut rng = Rng::seed_from_u64(7);
        for &n in &[8usize, 21, 56] {
            let x = random_signal(&mut rng, n);
            let spec = fft_1d(&x, Direction::Forward).unwrap();
            let time_energy: f64 = x.iter().map(|v| v.norm_sqr()).sum();
            let freq_energy: f64 = spec.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
            assert!(
                (time_energy - freq_energy).abs() < 1e-9 * time_energy.max(1.0),
                "Parseval violated at length {n}: {time_energy} vs {freq_energy}"
            );
        }
    }

    #[test]
    fn rfft2_shape_contract() {
        let x = RealTensor::zeros(&[2, 6, 9, 3]);
        let s = rfft2(&x).unwrap();
        assert_eq!(s.data().shape(), &[2, 6, 5, 3]); // floor(9/2)+1 = 5
        assert_eq!(s.original_width(), 9);
        let x = RealTensor::zeros(&[1, 4, 8, 2]);
        assert_eq!(rfft2(&x).unwrap().data().shape(), &[1, 4, 5, 2]);
    }

    #[test]
    fn rfft2_of_constant_map_is_pure_dc() {
        let x = RealTensor::full(&[1, 4, 6, 2], 3.0);
        let s = rfft2(&x).unwrap();
        let wh = 4;
        for u in 0..4 {
            for v in 0..wh {
                for ci in 0..2 {
                    let bin = s.data().data()[(u * wh + v) * 2 + ci];
                    if u == 0 && v == 0 {
                        assert!((bin - c(72.0, 0.0)).norm() < 1e-10, "DC should be H*W*3 = 72");
                    } else {
                        assert!(bin.norm() < 1e-10, "bin ({u},{v}) should vanish, got {bin}");
                    }
                }
            }
        }
    }

    #[test]
    fn rfft2_matches_naive_2d_dft() {
        let mut rng = Rng::seed_from_u64(8);
        for &(h, w) in &[(5usize, 6usize), (4, 7), (1, 5), (6, 1)] {
            let x = random_map(&mut rng, &[1, h, w, 1]);
            let s = rfft2(&x).unwrap();
            let plane: Vec<Complex64> = x.data().iter().map(|&v| c(v, 0.0)).collect();
            let full = dft2_naive_full(&plane, h, w, -1.0);
            let wh = half_width(w);
            for u in 0..h {
                for v in 0..wh {
                    let got = s.data().data()[u * wh + v];
                    let want = full[u * w + v];
                    assert!(
                        (got - want).norm() < 1e-9,
                        "{h}x{w} bin ({u},{v}): got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn retained_half_determines_full_spectrum() {
        // Conjugate symmetry of a real map's spectrum: F(H-u, W-v) = conj(F(u, v)).
        let mut rng = Rng::seed_from_u64(9);
        let (h, w) = (4usize, 6usize);
        let x = random_map(&mut rng, &[1, h, w, 1]);
        let plane: Vec<Complex64> = x.data().iter().map(|&v| c(v, 0.0)).collect();
        let full = dft2_naive_full(&plane, h, w, -1.0);
        for u in 0..h {
            for v in 0..w {
                let mirrored = full[((h - u) % h) * w + (w - v) % w].conj();
                assert!(
                    (full[u * w + v] - mirrored).norm() < 1e-9,
                    "symmetry violated at ({u},{v})"
                );
            }
        }
    }

    #[test]
    fn irfft2_round_trips_even_and_odd_widths() {
        let mut rng = Rng::seed_from_u64(10);
        for &(h, w) in &[(4usize, 7usize), (4, 8), (3, 5), (7, 7), (1, 4)] {
            let x = random_map(&mut rng, &[2, h, w, 3]);
            let back = irfft2(&rfft2(&x).unwrap()).unwrap();
            let err = x
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-10, "round trip error {err} at {h}x{w}");
        }
    }

    #[test]
    fn irfft2_of_dc_only_spectrum_is_constant() {
        let (h, w, wh) = (4usize, 6usize, 4usize);
        let mut data = ComplexTensor::zeros(&[1, h, wh, 1]);
        data.data_mut()[0] = c((h * w) as f64, 0.0);
        let s = SpectralMap::new(data, w).unwrap();
        let x = irfft2(&s).unwrap();
        for &v in x.data() {
            assert!((v - 1.0).abs() < 1e-12, "expected all-ones map, got {v}");
        }
    }

    #[test]
    fn irfft2_arbitrary_spectrum_matches_completion_oracle() {
        // For spectra that are NOT transforms of a real map (random bins), the
        // contract is: complete the dropped columns by symmetry, run the full
        // naive inverse, take the real part.
        let mut rng = Rng::seed_from_u64(11);
        for &(h, w) in &[(4usize, 6usize), (3, 7)] {
            let wh = half_width(w);
            let bins: Vec<Complex64> = (0..h * wh).map(|_| c(rng.normal(), rng.normal())).collect();
            let s = SpectralMap::new(
                ComplexTensor::from_vec(&[1, h, wh, 1], bins.clone()).unwrap(),
                w,
            )
            .unwrap();
            let got = irfft2(&s).unwrap();

            let mut full = vec![c(0.0, 0.0); h * w];
            for u in 0..h {
                for v in 0..wh {
                    full[u * w + v] = bins[u * wh + v];
                }
                for v in wh..w {
                    full[u * w + v] = bins[((h - u) % h) * wh + (w - v)].conj();
                }
            }
            let inv = dft2_naive_full(&full, h, w, 1.0);
            for i in 0..h * w {
                let want = inv[i].re / (h * w) as f64;
                assert!(
                    (got.data()[i] - want).abs() < 1e-9,
                    "{h}x{w} completion oracle mismatch at {i}"
                );
            }
        }
    }

    #[test]
    fn spectral_map_rejects_inconsistent_width() {
        let data = ComplexTensor::zeros(&[1, 4, 4, 1]);
        assert!(SpectralMap::new(data.clone(), 6).is_ok()); // 6/2+1 = 4
        let data = ComplexTensor::zeros(&[1, 4, 5, 1]);
        assert!(SpectralMap::new(data, 6).is_err());
    }

    #[test]
    fn unit_filter_is_identity() {
        let mut rng = Rng::seed_from_u64(12);
        let x = random_map(&mut rng, &[2, 4, 6, 3]);
        let mut w = FilterWeights::zeros(4, 6, 3);
        for v in w.data_mut().data_mut() {
            *v = c(1.0, 0.0);
        }
        let y = filter_enhance_forward(&x, &w).unwrap();
        let err = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "unit mask should pass the map through, err {err}");
    }

    #[test]
    fn zero_filter_annihilates() {
        let mut rng = Rng::seed_from_u64(13);
        let x = random_map(&mut rng, &[1, 4, 4, 2]);
        let w = FilterWeights::zeros(4, 4, 2);
        let y = filter_enhance_forward(&x, &w).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn filter_rejects_mismatched_shapes() {
        let x = RealTensor::zeros(&[1, 4, 6, 3]);
        let w = FilterWeights::zeros(4, 6, 2);
        assert!(filter_enhance_forward(&x, &w).is_err());
        let w = FilterWeights::zeros(4, 5, 3);
        assert!(filter_enhance_forward(&x, &w).is_err());
    }

    /// Independent circular-convolution oracle: filtering in frequency space
    /// must equal convolving with the kernel `irfft2(weights)` in pixel space.
    #[test]
    fn filter_matches_circular_convolution_oracle() {
        let mut rng = Rng::seed_from_u64(14);
        for &(h, w_len, ch) in &[(4usize, 4usize, 2usize), (8, 8, 4), (4, 7, 1)] {
            let x = random_map(&mut rng, &[1, h, w_len, ch]);
            let wh = half_width(w_len);
            let bins: Vec<Complex64> = (0..h * wh * ch)
                .map(|_| c(rng.normal(), rng.normal()))
                .collect();
            let weights = FilterWeights::from_tensor(
                ComplexTensor::from_vec(&[h, wh, ch], bins.clone()).unwrap(),
                w_len,
            )
            .unwrap();
            let fast = filter_enhance_forward(&x, &weights).unwrap();

            // Kernel = inverse transform of the mask (per channel).
            let kernel = irfft2(
                &SpectralMap::new(
                    ComplexTensor::from_vec(&[1, h, wh, ch], bins).unwrap(),
                    w_len,
                )
                .unwrap(),
            )
            .unwrap();
            for ci in 0..ch {
                for m in 0..h {
                    for n in 0..w_len {
                        let mut acc = 0.0;
                        for p in 0..h {
                            for q in 0..w_len {
                                let km = (h + m - p) % h;
                                let kn = (w_len + n - q) % w_len;
                                acc += x.data()[x.at4(0, p, q, ci)]
                                    * kernel.data()[kernel.at4(0, km, kn, ci)];
                            }
                        }
                        let got = fast.data()[fast.at4(0, m, n, ci)];
                        assert!(
                            (got - acc).abs() < 1e-9,
                            "{h}x{w_len}x{ch}: conv oracle mismatch at ({m},{n},{ci}): {got} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn unit_filter_backward_passes_gradient_through() {
        let mut rng = Rng::seed_from_u64(15);
        let x = random_map(&mut rng, &[1, 4, 6, 2]);
        let g = random_map(&mut rng, &[1, 4, 6, 2]);
        let mut w = FilterWeights::zeros(4, 6, 2);
        for v in w.data_mut().data_mut() {
            *v = c(1.0, 0.0);
        }
        let (gx, _) = filter_enhance_backward(&x, &w, &g).unwrap();
        let err = gx
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "identity filter must pass gradients through, err {err}");
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = Rng::seed_from_u64(16);
        let x = random_map(&mut rng, &[2, 4, 4, 2]);
        let mut w = FilterWeights::zeros(4, 4, 2);
        for v in w.data_mut().data_mut() {
            *v = c(rng.normal(), rng.normal());
        }
        let g = RealTensor::zeros(&[2, 4, 4, 2]);
        let (gx, gw) = filter_enhance_backward(&x, &w, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v.norm() == 0.0));
    }

    /// Central finite differences over every input pixel and every real/imag
    /// weight coordinate, on even and odd widths.
    #[test]
    fn filter_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(17);
        for &(h, w_len, ch) in &[(4usize, 6usize, 2usize), (3, 5, 2)] {
            let x = random_map(&mut rng, &[1, h, w_len, ch]);
            let mut w = FilterWeights::zeros(h, w_len, ch);
            for v in w.data_mut().data_mut() {
                *v = c(1.0 + 0.1 * rng.normal(), 0.1 * rng.normal());
            }
            let r = random_map(&mut rng, &[1, h, w_len, ch]); // projection -> scalar loss
            let loss = |xt: &RealTensor, wt: &FilterWeights| -> f64 {
                filter_enhance_forward(xt, wt)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (gx, gw) = filter_enhance_backward(&x, &w, &r).unwrap();

            // A coordinate passes on relative error, or on absolute agreement
            // below the finite-difference noise floor (structurally dead
            // coordinates such as the DC phase have true gradient zero, where
            // central differences only return rounding noise).
            let close = |numeric: f64, analytic: f64| -> bool {
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                ((numeric - analytic) / denom).abs() < 1e-4 || (numeric - analytic).abs() < 1e-7
            };
            let eps = 1e-5;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let numeric = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
                let analytic = gx.data()[i];
                assert!(
                    close(numeric, analytic),
                    "{h}x{w_len}: grad_x[{i}] numeric {numeric} vs analytic {analytic}"
                );
            }
            for i in 0..w.data().len() {
                for part in 0..2 {
                    let perturb = |delta: f64| {
                        let mut wp = w.clone();
                        let v = &mut wp.data_mut().data_mut()[i];
                        *v = if part == 0 {
                            c(v.re + delta, v.im)
                        } else {
                            c(v.re, v.im + delta)
                        };
                        loss(&x, &wp)
                    };
                    let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
                    let analytic = if part == 0 { gw.data()[i].re } else { gw.data()[i].im };
                    assert!(
                        close(numeric, analytic),
                        "{h}x{w_len}: grad_w[{i}].{} numeric {numeric} vs analytic {analytic}",
                        if part == 0 { "re" } else { "im" }
                    );
                }
            }
        }
    }

    #[test]
    fn filter_output_imaginary_residue_is_negligible() {
        // A symmetry-completed spectrum is Hermitian whenever its
        // self-conjugate bins (their own mirrors, e.g. DC) are real, and the
        // inverse of a Hermitian spectrum is real up to rounding. Mask a real
        // map's spectrum with weights that respect that and check the residue
        // of the full complex inverse directly.
        let mut rng = Rng::seed_from_u64(18);
        let (h, w_len) = (4usize, 6usize);
        let x = random_map(&mut rng, &[1, h, w_len, 1]);
        let wh = half_width(w_len);
        let mut bins: Vec<Complex64> =
            (0..h * wh).map(|_| c(rng.normal(), rng.normal())).collect();
        // Self-mirrored columns (v = 0 and v = W/2) pair row u with row H-u
        // inside the retained half, so a Hermitian mask must be conjugate-
        // symmetric there (hence real at the four self-conjugate bins).
        for v in [0, w_len / 2] {
            for u in 0..h {
                let mu = (h - u) % h;
                if mu == u {
                    let b = bins[u * wh + v];
                    bins[u * wh + v] = c(b.re, 0.0);
                } else if u < mu {
                    bins[mu * wh + v] = bins[u * wh + v].conj();
                }
            }
        }
        let spec = rfft2(&x).unwrap();
        let mut full = vec![c(0.0, 0.0); h * w_len];
        for u in 0..h {
            for v in 0..wh {
                full[u * w_len + v] = spec.data().data()[u * wh + v] * bins[u * wh + v];
            }
        }
        for u in 0..h {
            for v in wh..w_len {
                full[u * w_len + v] = full[((h - u) % h) * w_len + (w_len - v)].conj();
            }
        }
        let inv = dft2_naive_full(&full, h, w_len, 1.0);
        let residue = inv
            .iter()
            .map(|v| (v.im / (h * w_len) as f64).abs())
            .fold(0.0, f64::max);
        assert!(residue < 1e-10, "imaginary residue {residue} too large");
    }
}
