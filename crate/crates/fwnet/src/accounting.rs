//! Closed-form parameter and FLOP accounting.
//!
//! Counts are exact integers. FLOP counts follow the multiply-accumulate
//! convention of the published complexity formulas for the three token-mixing
//! kernels, plus exact MACs for every linear layer (patch embedding, FFNs,
//! merges, channel gates, classifier). Layer norms, activations and softmax
//! are excluded, matching how such totals are conventionally quoted.
//!
//! Parameter counts must agree *exactly* with an instantiated model — a test
//! asserts integer equality against [`FwNetModel::num_scalars`].

use crate::error::{arg_err, Result};
use crate::model::{ModelConfig, Variant, CHANNELS_PER_HEAD, SE_REDUCTION};

/// Smallest k with 2^k >= n (so `ceil(log2(n))`); requires n >= 1.
pub fn ceil_log2(n: u64) -> u32 {
    assert!(n >= 1, "logarithm of zero");
    64 - (n - 1).leading_zeros()
}

/// Global multi-head self-attention cost: `4HWC^2 + 2(HW)^2 C`.
pub fn flops_msa(h: u64, w: u64, c: u64) -> u64 {
    4 * h * w * c * c + 2 * (h * w) * (h * w) * c
}

/// Windowed multi-head self-attention cost: `4HWC^2 + 2M^2 HWC`.
/// The window must tile the map.
pub fn flops_wmsa(h: u64, w: u64, c: u64, m: u64) -> Result<u64> {
    if m == 0 || h % m != 0 || w % m != 0 {
        arg_err!("{h}x{w} map is not divisible into {m}x{m} windows");
    }
    Ok(4 * h * w * c * c + 2 * m * m * h * w * c)
}

/// Spectral filter-enhancement cost: `2HWC ceil(log2 HW) + HWC`
/// (forward + inverse transform butterflies plus the pointwise product).
pub fn flops_fe(h: u64, w: u64, c: u64) -> u64 {
    let hw = h * w;
    2 * hw * c * ceil_log2(hw) as u64 + hw * c
}

/// One named line of a cost report.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer breakdown with exact integer totals.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>) -> CostReport {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        CostReport {
            rows,
            total_params,
            total_flops,
        }
    }

    /// Aligned text table for terminal output.
    pub fn render_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .chain(["layer".len(), "total".len()])
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<name_w$}  {:>14}  {:>16}\n", "layer", "params", "flops");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<name_w$}  {:>14}  {:>16}\n",
                r.name, r.params, r.flops
            ));
        }
        s.push_str(&format!(
            "{:<name_w$}  {:>14}  {:>16}\n",
            "total", self.total_params, self.total_flops
        ));
        s
    }

    /// CSV with a header row; one line per layer plus a total line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,flops\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.name, r.params, r.flops));
        }
        s.push_str(&format!(
            "total,{},{}\n",
            self.total_params, self.total_flops
        ));
        s
    }
}

/// Shared enumeration behind [`count_params`] and [`model_flops`]: one row
/// per layer, carrying both the parameter and the FLOP count at the given
/// input resolution.
fn cost_report(config: &ModelConfig, resolution: usize) -> Result<CostReport> {
    let mut probe = config.clone();
    probe.image_size = resolution;
    probe.validate()?;

    let r = config.ffn_ratio as u64;
    let ffn_params = |c: u64| 2 * r * c * c + (r + 1) * c;
    let ffn_flops = |n: u64, c: u64| 2 * r * n * n * c * c;
    let ln_params = |c: u64| 2 * c;
    let mut rows = Vec::new();

    let d = config.embed_dim as u64;
    let p = config.patch as u64;
    let res = resolution as u64;
    rows.push(CostRow {
        name: "patch_embed".into(),
        params: p * p * 3 * d + d + ln_params(d),
        flops: res * res * 3 * d,
    });

    for (s, &depth) in config.depths.iter().enumerate() {
        let c = config.stage_dim(s) as u64;
        let n = ((probe.image_size / probe.patch) >> s) as u64;
        let m = config.window as u64;
        let heads = config.heads[s] as u64;
        for j in 0..depth {
            let name = format!("stages.{s}.blocks.{j}");
            if j % 2 == 0 {
                // Attention block: two norms, QKV + output projections,
                // relative-position bias table, FFN.
                let attn_params =
                    c * 3 * c + 3 * c + c * c + c + (2 * m - 1) * (2 * m - 1) * heads;
                rows.push(CostRow {
                    name: format!("{name} (attention)"),
                    params: 2 * ln_params(c) + attn_params + ffn_params(c),
                    flops: flops_wmsa(n, n, c, m)? + ffn_flops(n, c),
                });
            } else {
                // Filter block: contents depend on the variant.
                let (core_params, core_flops) = match config.variant {
                    Variant::Win => (0, 0),
                    Variant::Fwnet => (
                        ln_params(c) + 2 * n * (n / 2 + 1) * c,
                        flops_fe(n, n, c),
                    ),
                    Variant::FwnetEca => (
                        ln_params(c) + 2 * n * (n / 2 + 1) * c + 3,
                        // Gate: pool, three-tap conv, channel-wise rescale.
                        flops_fe(n, n, c) + n * n * c + 3 * c + n * n * c,
                    ),
                    Variant::FwnetSe => {
                        let hidden = c / SE_REDUCTION as u64;
                        (
                            ln_params(c) + 2 * n * (n / 2 + 1) * c + 2 * c * hidden + hidden + c,
                            flops_fe(n, n, c) + n * n * c + 2 * c * hidden + n * n * c,
                        )
                    }
                };
                rows.push(CostRow {
                    name: format!("{name} (filter)"),
                    params: core_params + ln_params(c) + ffn_params(c),
                    flops: core_flops + ffn_flops(n, c),
                });
            }
        }
        if s + 1 < config.depths.len() {
            rows.push(CostRow {
                name: format!("merges.{s}"),
                params: ln_params(4 * c) + 4 * c * 2 * c,
                flops: (n / 2) * (n / 2) * 4 * c * 2 * c,
            });
        }
    }

    let c_last = config.stage_dim(config.num_stages() - 1) as u64;
    let k = config.num_classes as u64;
    rows.push(CostRow {
        name: "head".into(),
        params: ln_params(c_last) + c_last * k + k,
        flops: c_last * k,
    });
    Ok(CostReport::from_rows(rows))
}

/// Exact per-layer parameter counts from closed forms (no tensors built).
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    cost_report(config, config.image_size)
}

/// Exact per-layer MAC counts at the given input resolution (which may
/// differ from the configured training resolution).
pub fn model_flops(config: &ModelConfig, resolution: usize) -> Result<CostReport> {
    cost_report(config, resolution)
}

// ── Sweeps ────────────────────────────────────────────────────────────────

/// Token-mixing kernels compared by the sweep and benchmark commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Msa,
    Wmsa,
    Fe,
}

pub const ALL_METHODS: [Method; 3] = [Method::Msa, Method::Wmsa, Method::Fe];

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "msa" => Ok(Method::Msa),
            "wmsa" => Ok(Method::Wmsa),
            "fe" => Ok(Method::Fe),
            other => Err(crate::error::FwError::Arg(format!(
                "unknown method {other:?} (expected msa, wmsa or fe)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Msa => "msa",
            Method::Wmsa => "wmsa",
            Method::Fe => "fe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Params,
    Flops,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Axis values are token widths; the spatial grid shrinks along the
    /// stage progression (width doubles as the grid side halves), anchored
    /// at the 56x56x96 first-stage shape.
    Dimension,
    /// Axis values are input image resolutions; the token grid is the
    /// resolution over the stock patch size, at fixed first-stage width.
    Resolution,
}

/// One CSV line of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub method: &'static str,
    pub axis_value: usize,
    pub count: u64,
}

/// Anchor shape for sweeps: first-stage grid side, width, window, patch.
const ANCHOR_GRID: u64 = 56;
const ANCHOR_DIM: u64 = 96;
const ANCHOR_WINDOW: u64 = 7;
const ANCHOR_PATCH: u64 = 4;

/// Kernel cost table behind the width/resolution comparison figures: one row
/// per (method, axis value), columns `method,axis_value,count`.
pub fn sweep_rows(
    kind: SweepKind,
    axis: SweepAxis,
    methods: &[Method],
    values: &[usize],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || methods.is_empty() {
        arg_err!("sweep needs at least one method and one axis value");
    }
    let mut rows = Vec::new();
    for &v in values {
        // Resolve the (grid, width) shape this axis point describes.
        let (n, c) = match axis {
            SweepAxis::Dimension => {
                let c = v as u64;
                if c == 0 || (ANCHOR_GRID * ANCHOR_DIM) % c != 0 {
                    arg_err!(
                        "width {v} does not sit on the stage progression anchored at {}x{}",
                        ANCHOR_GRID,
                        ANCHOR_DIM
                    );
                }
                (ANCHOR_GRID * ANCHOR_DIM / c, c)
            }
            SweepAxis::Resolution => {
                let r = v as u64;
                if r == 0 || r % ANCHOR_PATCH != 0 {
                    arg_err!("resolution {v} is not divisible by the patch size {ANCHOR_PATCH}");
                }
                (r / ANCHOR_PATCH, ANCHOR_DIM)
            }
        };
        for &method in methods {
            let count = match (kind, method) {
                // Parameters: QKV + output projections for attention (plus
                // the relative bias table for the windowed form); the
                // complex spectral weight tensor for filtering.
                (SweepKind::Params, Method::Msa) => 4 * c * c + 4 * c,
                (SweepKind::Params, Method::Wmsa) => {
                    let heads = (c / CHANNELS_PER_HEAD as u64).max(1);
                    4 * c * c
                        + 4 * c
                        + (2 * ANCHOR_WINDOW - 1) * (2 * ANCHOR_WINDOW - 1) * heads
                }
                (SweepKind::Params, Method::Fe) => 2 * n * (n / 2 + 1) * c,
                (SweepKind::Flops, Method::Msa) => flops_msa(n, n, c),
                (SweepKind::Flops, Method::Wmsa) => flops_wmsa(n, n, c, ANCHOR_WINDOW)?,
                (SweepKind::Flops, Method::Fe) => flops_fe(n, n, c),
            };
            rows.push(SweepRow {
                method: method.name(),
                axis_value: v,
                count,
            });
        }
    }
    Ok(rows)
}

/// [`sweep_rows`] rendered as CSV with the `method,axis_value,count` header.
pub fn sweep_csv(
    kind: SweepKind,
    axis: SweepAxis,
    methods: &[Method],
    values: &[usize],
) -> Result<String> {
    let mut s = String::from("method,axis_value,count\n");
    for row in sweep_rows(kind, axis, methods, values)? {
        s.push_str(&format!("{},{},{}\n", row.method, row.axis_value, row.count));
    }
    Ok(s)
}

// ── Tests ─────────────────────────────────────────────────────────────────
