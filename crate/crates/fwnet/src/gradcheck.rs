//! Central finite-difference verification of every analytic backward pass.
//!
//! Every layer is checked on a small random fixture: the scalar loss is a
//! fixed random projection of the layer output, its gradient with respect to
//! every input and parameter coordinate is computed analytically by the
//! layer's backward pass and numerically by central differences, and the two
//! are compared coordinate by coordinate.
//!
//! Comparison convention: the relative error uses the denominator
//! `max(|analytic|, |numeric|, 1e-8)`, and a coordinate whose absolute
//! difference is below 1e-7 counts as matching regardless of the ratio —
//! structurally-zero gradients (e.g. imaginary parts of self-conjugate
//! spectral bins) sit at exact zero analytically while central differences
//! leave ~1e-10 of roundoff noise.

use num_complex::Complex64;

use crate::attention::{window_partition, wmsa_backward, wmsa_forward, AttentionParams};
use crate::channels::{eca_backward, eca_forward, se_backward, se_forward, EcaParams, SeParams};
use crate::error::{arg_err, FwError, Result};
use crate::layers::{
    embed_backward, embed_forward, ffn_backward, ffn_forward, head_backward, head_forward,
    merge_backward, merge_forward, FfnParams, HeadParams, PatchEmbedParams, PatchMergeParams,
    LN_EPS,
};
use crate::model::{cross_entropy, init_params, model_backward, model_forward, ModelConfig};
use crate::rng::Rng;
use crate::spectral::{filter_enhance_backward, filter_enhance_forward, FilterWeights};
use crate::tensor::{layer_norm, layer_norm_backward, layer_norm_cached, RealTensor};

/// Step used by every central difference in this module.
pub const FD_EPS: f64 = 1e-5;

/// Per-layer tolerance on the relative error.
pub const LAYER_TOL: f64 = 1e-4;

/// End-to-end (full model) tolerance.
pub const MODEL_TOL: f64 = 1e-3;

/// Absolute-difference floor below which a coordinate always matches.
pub const ABS_FLOOR: f64 = 1e-7;

/// Central-difference gradient of a scalar function: coordinate i gets
/// `(f(p + eps*e_i) - f(p - eps*e_i)) / (2 eps)`. Errors if any evaluation
/// returns a non-finite value, naming the offending coordinate.
pub fn finite_diff_scalar<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        arg_err!("finite-difference step must be positive, got {eps}");
    }
    let mut grad = Vec::with_capacity(params.len());
    let mut scratch = params.to_vec();
    for i in 0..params.len() {
        scratch[i] = params[i] + eps;
        let plus = f(&scratch)?;
        scratch[i] = params[i] - eps;
        let minus = f(&scratch)?;
        scratch[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FwError::Numeric(format!(
                "non-finite function value while probing coordinate {i}: f+ = {plus}, f- = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// One checked gradient set.
#[derive(Debug, Clone)]
pub struct GradRow {
    pub name: String,
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_err: f64,
    /// Largest absolute difference over all coordinates.
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Full suite outcome.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// Aligned text table, one line per checked gradient set.
    pub fn render(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = format!(
            "{:<name_w$}  {:>12}  {:>12}  {:>8}  {}\n",
            "layer", "max_rel_err", "max_abs_err", "tol", "status"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<name_w$}  {:>12.3e}  {:>12.3e}  {:>8.0e}  {}\n",
                r.name,
                r.max_rel_err,
                r.max_abs_err,
                r.tolerance,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,max_rel_err,max_abs_err,tolerance,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                r.name,
                r.max_rel_err,
                r.max_abs_err,
                r.tolerance,
                if r.pass { "pass" } else { "fail" }
            ));
        }
        s
    }
}

/// Compare numeric and analytic gradients under the module's convention.
fn compare(name: &str, tol: f64, numeric: &[f64], analytic: &[f64]) -> GradRow {
    assert_eq!(
        numeric.len(),
        analytic.len(),
        "{name}: gradient sets must have equal size"
    );
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&n, &a) in numeric.iter().zip(analytic) {
        let abs = (n - a).abs();
        max_abs = max_abs.max(abs);
        if abs >= ABS_FLOOR {
            max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(1e-8));
        }
    }
    GradRow {
        name: name.to_string(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        tolerance: tol,
        pass: max_rel < tol,
    }
}

// ── Fixture plumbing ──────────────────────────────────────────────────────

/// Flatten a list of tensors into one coordinate vector.
fn pack(pieces: &[RealTensor]) -> Vec<f64> {
    let mut flat = Vec::new();
    for p in pieces {
        flat.extend_from_slice(p.data());
    }
    flat
}

/// Rebuild tensors with the shapes of `templates` from one coordinate vector.
fn unpack(templates: &[RealTensor], flat: &[f64]) -> Vec<RealTensor> {
    let mut out = Vec::with_capacity(templates.len());
    let mut pos = 0;
    for t in templates {
        let n = t.len();
        out.push(RealTensor::from_vec(t.shape(), flat[pos..pos + n].to_vec()).expect("template shape"));
        pos += n;
    }
    assert_eq!(pos, flat.len(), "coordinate vector length mismatch");
    out
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> RealTensor {
    let n: usize = shape.iter().product();
    RealTensor::from_vec(shape, (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Run one layer check: `pieces` are the differentiated tensors, `eval` maps
/// concrete pieces to the scalar loss, `analytic` are the layer-backward
/// gradients in matching order.
fn fd_check<F>(
    name: &str,
    tol: f64,
    pieces: &[RealTensor],
    analytic: &[RealTensor],
    eval: F,
) -> Result<GradRow>
where
    F: Fn(&[RealTensor]) -> Result<f64>,
{
    let theta = pack(pieces);
    let numeric = finite_diff_scalar(|t| eval(&unpack(pieces, t)), &theta, FD_EPS)?;
    Ok(compare(name, tol, &numeric, &pack(analytic)))
}

/// View a complex tensor as a real tensor with a trailing (re, im) axis.
fn complex_as_real(w: &FilterWeights) -> RealTensor {
    let d = w.data();
    let mut shape = d.shape().to_vec();
    shape.push(2);
    let mut flat = Vec::with_capacity(2 * d.len());
    for v in d.data() {
        flat.push(v.re);
        flat.push(v.im);
    }
    RealTensor::from_vec(&shape, flat).expect("shape matches data")
}

fn real_as_filter(t: &RealTensor, height: usize, width: usize, channels: usize) -> FilterWeights {
    let mut w = FilterWeights::zeros(height, width, channels);
    for (v, pair) in w.data_mut().data_mut().iter_mut().zip(t.data().chunks(2)) {
        *v = Complex64::new(pair[0], pair[1]);
    }
    w
}

fn dot(a: &RealTensor, b: &RealTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ── The individual checks ─────────────────────────────────────────────────

fn check_layer_norm(rng: &mut Rng) -> Result<GradRow> {
    let x = random_tensor(rng, &[3, 5], 1.0);
    let mut gamma = random_tensor(rng, &[5], 0.2);
    for v in gamma.data_mut() {
        *v += 1.0;
    }
    let beta = random_tensor(rng, &[5], 0.3);
    let r = random_tensor(rng, &[3, 5], 1.0);
    let (_, cache) = layer_norm_cached(&x, &gamma, &beta, LN_EPS)?;
    let (dx, dgamma, dbeta) = layer_norm_backward(&cache, &gamma, &r)?;
    fd_check(
        "layer_norm",
        LAYER_TOL,
        &[x, gamma, beta],
        &[dx, dgamma, dbeta],
        |p| Ok(dot(&layer_norm(&p[0], &p[1], &p[2], LN_EPS)?, &r)),
    )
}

fn check_ffn(rng: &mut Rng) -> Result<GradRow> {
    let x = random_tensor(rng, &[1, 2, 2, 4], 1.0);
    let mut p = FfnParams::zeros(4, 2)?;
    for t in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
        for v in t.data_mut() {
            *v = 0.4 * rng.normal();
        }
    }
    let r = random_tensor(rng, &[1, 2, 2, 4], 1.0);
    let (dx, dp) = ffn_backward(&x, &p, &r)?;
    fd_check(
        "ffn",
        LAYER_TOL,
        &[x, p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()],
        &[dx, dp.w1, dp.b1, dp.w2, dp.b2],
        |t| {
            let p = FfnParams {
                w1: t[1].clone(),
                b1: t[2].clone(),
                w2: t[3].clone(),
                b2: t[4].clone(),
            };
            Ok(dot(&ffn_forward(&t[0], &p)?, &r))
        },
    )
}

fn check_filter_enhance(rng: &mut Rng) -> Result<GradRow> {
    let (h, w, c) = (4, 4, 2);
    let x = random_tensor(rng, &[1, h, w, c], 1.0);
    let mut fw = FilterWeights::zeros(h, w, c);
    for v in fw.data_mut().data_mut() {
        *v = Complex64::new(1.0 + 0.3 * rng.normal(), 0.3 * rng.normal());
    }
    let r = random_tensor(rng, &[1, h, w, c], 1.0);
    let (dx, dw) = filter_enhance_backward(&x, &fw, &r)?;
    let dw = FilterWeights::from_tensor(dw, w)?;
    fd_check(
        "filter_enhance",
        LAYER_TOL,
        &[x, complex_as_real(&fw)],
        &[dx, complex_as_real(&dw)],
        |t| {
            let fw = real_as_filter(&t[1], h, w, c);
            Ok(dot(&filter_enhance_forward(&t[0], &fw)?, &r))
        },
    )
}

fn check_wmsa(rng: &mut Rng) -> Result<GradRow> {
    let (m, c, heads) = (2, 4, 2);
    let x = random_tensor(rng, &[1, 4, 4, c], 1.0);
    let mut p = AttentionParams::zeros(c, heads, m)?;
    for t in [
        &mut p.w_qkv,
        &mut p.b_qkv,
        &mut p.w_out,
        &mut p.b_out,
        &mut p.bias_table,
    ] {
        for v in t.data_mut() {
            *v = 0.4 * rng.normal();
        }
    }
    let grid = window_partition(&x, m)?;
    let r_grid = window_partition(&random_tensor(rng, &[1, 4, 4, c], 1.0), m)?;
    let (dgrid, dp) = wmsa_backward(&grid, &p, &r_grid)?;
    let pack_p = |p: &AttentionParams| {
        [
            p.w_qkv.clone(),
            p.b_qkv.clone(),
            p.w_out.clone(),
            p.b_out.clone(),
            p.bias_table.clone(),
        ]
    };
    let mut pieces = vec![x.clone()];
    pieces.extend(pack_p(&p));
    let mut analytic = vec![crate::attention::window_reverse(&dgrid, 4, 4)?];
    analytic.extend(pack_p(&dp));
    let base = p;
    fd_check("wmsa", LAYER_TOL, &pieces, &analytic, move |t| {
        let mut p = AttentionParams::zeros_like(&base);
        p.w_qkv = t[1].clone();
        p.b_qkv = t[2].clone();
        p.w_out = t[3].clone();
        p.b_out = t[4].clone();
        p.bias_table = t[5].clone();
        let g = window_partition(&t[0], m)?;
        let out = wmsa_forward(&g, &p)?;
        Ok(dot(&out.windows, &r_grid.windows))
    })
}

fn check_eca(rng: &mut Rng) -> Result<GradRow> {
    let x = random_tensor(rng, &[1, 3, 3, 4], 1.0);
    let mut p = EcaParams::zeros();
    for v in p.kernel.data_mut() {
        *v = 0.5 * rng.normal();
    }
    let r = random_tensor(rng, &[1, 3, 3, 4], 1.0);
    let (dx, dp) = eca_backward(&x, &p, &r)?;
    fd_check(
        "eca",
        LAYER_TOL,
        &[x, p.kernel.clone()],
        &[dx, dp.kernel],
        |t| {
            let p = EcaParams {
                kernel: t[1].clone(),
            };
            Ok(dot(&eca_forward(&t[0], &p)?, &r))
        },
    )
}

fn check_se(rng: &mut Rng) -> Result<GradRow> {
    let x = random_tensor(rng, &[1, 3, 3, 4], 1.0);
    let mut p = SeParams::zeros(4, 2)?;
    for t in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
        for v in t.data_mut() {
            *v = 0.5 * rng.normal();
        }
    }
    let r = random_tensor(rng, &[1, 3, 3, 4], 1.0);
    let (dx, dp) = se_backward(&x, &p, &r)?;
    fd_check(
        "se",
        LAYER_TOL,
        &[x, p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()],
        &[dx, dp.w1, dp.b1, dp.w2, dp.b2],
        |t| {
            let p = SeParams {
                w1: t[1].clone(),
                b1: t[2].clone(),
                w2: t[3].clone(),
                b2: t[4].clone(),
            };
            Ok(dot(&se_forward(&t[0], &p)?, &r))
        },
    )
}

fn check_patch_embed(rng: &mut Rng) -> Result<GradRow> {
    let img = random_tensor(rng, &[1, 4, 4, 3], 1.0);
    let mut p = PatchEmbedParams::zeros(2, 3, 4)?;
    for v in p.w.data_mut() {
        *v = 0.4 * rng.normal();
    }
    for v in p.b.data_mut() {
        *v = 0.4 * rng.normal();
    }
    for v in p.gamma.data_mut() {
        *v = 1.0 + 0.2 * rng.normal();
    }
    for v in p.beta.data_mut() {
        *v = 0.3 * rng.normal();
    }
    let r = random_tensor(rng, &[1, 2, 2, 4], 1.0);
    let (dimg, dp) = embed_backward(&img, &p, &r)?;
    let patch = p.patch;
    fd_check(
        "patch_embed",
        LAYER_TOL,
        &[img, p.w.clone(), p.b.clone(), p.gamma.clone(), p.beta.clone()],
        &[dimg, dp.w, dp.b, dp.gamma, dp.beta],
        move |t| {
            let p = PatchEmbedParams {
                w: t[1].clone(),
                b: t[2].clone(),
                gamma: t[3].clone(),
                beta: t[4].clone(),
                patch,
            };
            Ok(dot(&embed_forward(&t[0], &p)?, &r))
        },
    )
}

fn check_patch_merge(rng: &mut Rng) -> Result<GradRow> {
    let x = random_tensor(rng, &[1, 4, 4, 3], 1.0);
    let mut p = PatchMergeParams::zeros(3);
    for v in p.gamma.data_mut() {
        *v = 1.0 + 0.2 * rng.normal();
    }
    for v in p.beta.data_mut() {
        *v = 0.3 * rng.normal();
    }
    for v in p.w.data_mut() {
        *v = 0.4 * rng.normal();
    }
    let r = random_tensor(rng, &[1, 2, 2, 6], 1.0);
    let (dx, dp) = merge_backward(&x, &p, &r)?;
    fd_check(
        "patch_merge",
        LAYER_TOL,
        &[x, p.gamma.clone(), p.beta.clone(), p.w.clone()],
        &[dx, dp.gamma, dp.beta, dp.w],
        |t| {
            let p = PatchMergeParams {
                gamma: t[1].clone(),
                beta: t[2].clone(),
                w: t[3].clone(),
            };
            Ok(dot(&merge_forward(&t[0], &p)?, &r))
        },
    )
}

fn check_head(rng: &mut Rng) -> Result<GradRow> {
    let x = random_tensor(rng, &[2, 2, 2, 5], 1.0);
    let mut p = HeadParams::zeros(5, 3);
    for v in p.gamma.data_mut() {
        *v = 1.0 + 0.2 * rng.normal();
    }
    for t in [&mut p.beta, &mut p.w, &mut p.b] {
        for v in t.data_mut() {
            *v = 0.4 * rng.normal();
        }
    }
    let r = random_tensor(rng, &[2, 3], 1.0);
    let (dx, dp) = head_backward(&x, &p, &r)?;
    fd_check(
        "head",
        LAYER_TOL,
        &[x, p.gamma.clone(), p.beta.clone(), p.w.clone(), p.b.clone()],
        &[dx, dp.gamma, dp.beta, dp.w, dp.b],
        |t| {
            let p = HeadParams {
                gamma: t[1].clone(),
                beta: t[2].clone(),
                w: t[3].clone(),
                b: t[4].clone(),
            };
            Ok(dot(&head_forward(&t[0], &p)?, &r))
        },
    )
}

/// End-to-end check on a desk-scale model: 8x8 inputs, one stage of one
/// attention and one filter block. Every third parameter coordinate is
/// probed, which still touches every tensor in the model.
fn check_end_to_end(rng: &mut Rng) -> Result<GradRow> {
    let cfg = ModelConfig {
        patch: 4,
        embed_dim: 8,
        depths: vec![2],
        window: 2,
        heads: vec![2],
        ffn_ratio: 2,
        num_classes: 3,
        variant: crate::model::Variant::FwnetEca,
        image_size: 8,
    };
    let model = init_params(&cfg, rng.next_u64())?;
    let img = random_tensor(rng, &[2, 8, 8, 3], 1.0);
    let labels = [1usize, 2];
    let (_, grads) = model_backward(&img, &labels, &model)?;
    let analytic = grads.to_flat();
    let theta = model.to_flat();
    let mut scratch = crate::model::zeros_like(&model);
    let mut numeric_probed = Vec::new();
    let mut analytic_probed = Vec::new();
    let mut flat = theta.clone();
    for i in (0..theta.len()).step_by(3) {
        flat[i] = theta[i] + FD_EPS;
        scratch.copy_from_flat(&flat)?;
        let (plus, _) = cross_entropy(&model_forward(&img, &scratch)?, &labels)?;
        flat[i] = theta[i] - FD_EPS;
        scratch.copy_from_flat(&flat)?;
        let (minus, _) = cross_entropy(&model_forward(&img, &scratch)?, &labels)?;
        flat[i] = theta[i];
        numeric_probed.push((plus - minus) / (2.0 * FD_EPS));
        analytic_probed.push(analytic[i]);
    }
    Ok(compare("model (end to end)", MODEL_TOL, &numeric_probed, &analytic_probed))
}

// ── Suite drivers ─────────────────────────────────────────────────────────

/// Check every backward pass in the crate. Deterministic per seed.
pub fn run_suite(seed: u64) -> Result<GradReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let rows = vec![
        check_layer_norm(&mut rng)?,
        check_ffn(&mut rng)?,
        check_filter_enhance(&mut rng)?,
        check_wmsa(&mut rng)?,
        check_eca(&mut rng)?,
        check_se(&mut rng)?,
        check_patch_embed(&mut rng)?,
        check_patch_merge(&mut rng)?,
        check_head(&mut rng)?,
        check_end_to_end(&mut rng)?,
    ];
    Ok(GradReport { rows })
}

/// Sensitivity fixture: a quadratic function with a hand-written gradient.
/// Evaluated at the origin, the gradient is exactly the linear coefficient
/// vector, every coordinate of which lies in [1/2, 3/2] — so a corruption
/// of any coordinate is guaranteed to be visible. `corrupt` maps a
/// coordinate index to a multiplicative factor applied to that analytic
/// gradient entry (identity = honest backward).
fn fixture_row(seed: u64, corrupt: impl Fn(usize) -> f64) -> Result<GradRow> {
    let mut rng = Rng::seed_from_u64(seed);
    let n = 12;
    // f(t) = a . t + t^T B t: the gradient at t = 0 is exactly a.
    let a: Vec<f64> = (0..n).map(|_| 0.5 + rng.uniform()).collect();
    let b: Vec<f64> = (0..n * n).map(|_| 0.3 * rng.normal()).collect();
    let t0 = vec![0.0; n];
    let f = |t: &[f64]| -> Result<f64> {
        let mut v = 0.0;
        for i in 0..n {
            v += a[i] * t[i];
            for j in 0..n {
                v += t[i] * b[i * n + j] * t[j];
            }
        }
        Ok(v)
    };
    let analytic: Vec<f64> = (0..n).map(|i| a[i] * corrupt(i)).collect();
    let numeric = finite_diff_scalar(f, &t0, FD_EPS)?;
    Ok(compare("fixture (quadratic)", LAYER_TOL, &numeric, &analytic))
}

/// The honest fixture plus the full suite — everything must pass.
pub fn run_suite_clean(seed: u64) -> Result<GradReport> {
    let mut report = run_suite(seed)?;
    report.rows.push(fixture_row(seed, |_| 1.0)?);
    Ok(report)
}

/// Deliberately corrupted fixture (sign flip on one gradient coordinate):
/// the report must contain a failure, demonstrating the harness would catch
/// a broken backward pass.
pub fn run_suite_injected(seed: u64) -> Result<GradReport> {
    let mut report = run_suite(seed)?;
    report.rows.push(fixture_row(seed, |i| if i == 3 { -1.0 } else { 1.0 })?);
    Ok(report)
}

// ── Tests ─────────────────────────────────────────────────────────────────
