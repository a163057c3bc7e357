//! Wall-clock micro-benchmarks for the three token mixers.
//!
//! Each row times one kernel forward pass on random data at a given image
//! resolution and channel width. Resolutions are in image pixels; the timed
//! token grid is `resolution / 4`, matching the model's 4x4 patch embedding.
//! Global attention is the windowed kernel with a single window covering the
//! whole grid, so the three methods differ only in the mixing step being
//! measured. Combinations the kernels cannot run (resolutions that do not
//! tile into patches or windows) are skipped and reported as warnings.

use std::time::Instant;

use crate::accounting::{flops_fe, flops_msa, flops_wmsa, Method};
use crate::attention::{window_partition, wmsa_forward, AttentionParams};
use crate::error::{arg_err, Result};
use crate::rng::Rng;
use crate::spectral::{filter_enhance_forward, FilterWeights};
use crate::tensor::RealTensor;

/// Untimed runs before measurement starts.
pub const WARMUP: usize = 5;

/// Image pixels per token after patch embedding.
const PATCH: usize = 4;

/// Attention heads scale with width, one per 32 channels.
const CHANNELS_PER_HEAD: usize = 32;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub method: Method,
    /// Image resolution in pixels (token grid is `resolution / 4`).
    pub resolution: usize,
    pub channels: usize,
    /// Tokens per window side; the whole grid for global attention, 0 where
    /// windows do not apply.
    pub window: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Closed-form floating-point operation count for one forward pass.
    pub flops: u64,
}

#[derive(Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// One message per skipped (method, resolution, channels) combination.
    pub warnings: Vec<String>,
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> RealTensor {
    let mut t = RealTensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal() * scale;
    }
    t
}

/// Time `reps` runs of `f` after [`WARMUP`] untimed runs.
fn time_runs<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, f64)> {
    for _ in 0..WARMUP {
        std::hint::black_box(f()?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        std::hint::black_box(f()?);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / reps as f64;
    Ok((mean, var.sqrt()))
}

fn bench_attention(n: usize, c: usize, m: usize, reps: usize) -> Result<(f64, f64)> {
    let mut rng = Rng::seed_from_u64(0xbe9c);
    let heads = (c / CHANNELS_PER_HEAD).max(1);
    let mut p = AttentionParams::zeros(c, heads, m)?;
    for t in [&mut p.w_qkv, &mut p.b_qkv, &mut p.w_out, &mut p.b_out, &mut p.bias_table] {
        for v in t.data_mut() {
            *v = rng.normal() * 0.02;
        }
    }
    let x = random_tensor(&mut rng, &[1, n, n, c], 1.0);
    let grid = window_partition(&x, m)?;
    time_runs(reps, || wmsa_forward(&grid, &p))
}

fn bench_filter(n: usize, c: usize, reps: usize) -> Result<(f64, f64)> {
    let mut rng = Rng::seed_from_u64(0xf17e);
    let mut w = FilterWeights::zeros(n, n, c);
    for v in w.data_mut().data_mut() {
        v.re = 1.0 + rng.normal() * 0.02;
        v.im = rng.normal() * 0.02;
    }
    let x = random_tensor(&mut rng, &[1, n, n, c], 1.0);
    time_runs(reps, || filter_enhance_forward(&x, &w))
}

/// Benchmark every runnable (method, resolution, channels) combination.
pub fn run_bench(
    methods: &[Method],
    resolutions: &[usize],
    channels: &[usize],
    window: usize,
    reps: usize,
) -> Result<BenchReport> {
    if methods.is_empty() || resolutions.is_empty() || channels.is_empty() {
        arg_err!("need at least one method, resolution, and channel width");
    }
    if reps == 0 || window == 0 {
        arg_err!("reps and window must be positive");
    }
    if let Some(&bad) = resolutions.iter().chain(channels).find(|&&v| v == 0) {
        arg_err!("resolutions and channels must be positive, got {bad}");
    }

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &method in methods {
        for &res in resolutions {
            if res % PATCH != 0 {
                warnings.push(format!(
                    "skipping {} at {res}px: resolution must tile into {PATCH}px patches",
                    method.name()
                ));
                continue;
            }
            let n = res / PATCH;
            for &c in channels {
                let (n64, c64) = (n as u64, c as u64);
                let (win, timing, flops) = match method {
                    Method::Msa => (n, bench_attention(n, c, n, reps)?, flops_msa(n64, n64, c64)),
                    Method::Wmsa => {
                        if n % window != 0 {
                            warnings.push(format!(
                                "skipping wmsa at {res}px, {c} channels: {n}x{n} token grid \
                                 does not tile into {window}x{window} windows"
                            ));
                            continue;
                        }
                        (
                            window,
                            bench_attention(n, c, window, reps)?,
                            flops_wmsa(n64, n64, c64, window as u64)?,
                        )
                    }
                    Method::Fe => (0, bench_filter(n, c, reps)?, flops_fe(n64, n64, c64)),
                };
                let (mean_ms, std_ms) = timing;
                rows.push(BenchRow {
                    method,
                    resolution: res,
                    channels: c,
                    window: win,
                    reps,
                    mean_ms,
                    std_ms,
                    flops,
                });
            }
        }
    }
    Ok(BenchReport { rows, warnings })
}

/// Render benchmark rows as CSV.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,resolution,channels,window,reps,mean_ms,std_ms,flops\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{}\n",
            r.method.name(),
            r.resolution,
            r.channels,
            r.window,
            r.reps,
            r.mean_ms,
            r.std_ms,
            r.flops
        ));
    }
    out
}

// ── Tests ─────────────────────────────────────────────────────────────────
