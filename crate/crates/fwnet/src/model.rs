//! The full hierarchical model: patch embedding, stages of alternating
//! window-attention and filter-enhancement blocks, patch merging between
//! stages, and the pooled classifier head.
//!
//! Within every stage, blocks at even index are attention blocks and blocks
//! at odd index are filter blocks; stage depths are therefore required to be
//! even. Both block kinds use the same two-residual pre-norm skeleton
//!
//! ```text
//! x_hat = Core(LN(x)) + x        out = FFN(LN(x_hat)) + x_hat
//! ```
//!
//! where `Core` is windowed self-attention or spectral filtering followed by
//! a channel gate, depending on the block kind and the model variant.
//!
//! Gradients are carried in a second `FwNetModel` of identical shape (see
//! [`zeros_like`]), which keeps every layer's parameter/gradient pairing
//! trivially consistent and lets the optimizer and the checkpoint code share
//! one traversal.

use num_complex::Complex64;

use crate::attention::{
    window_partition, window_reverse, wmsa_backward_with_cache, wmsa_forward_cached,
    AttentionParams, WindowGrid, WmsaCache,
};
use crate::channels::{
    eca_backward_with_cache, eca_forward_cached, se_backward_with_cache, se_forward_cached,
    EcaCache, EcaParams, SeCache, SeParams,
};
use crate::error::{arg_err, config_err, shape_err, FwError, Result};
use crate::layers::{
    embed_backward_with_cache, embed_forward_cached, ffn_backward_with_cache, ffn_forward_cached,
    head_backward_with_cache, head_forward_cached, merge_backward_with_cache,
    merge_forward_cached, FfnCache, FfnParams, HeadCache, HeadParams, PatchEmbedCache,
    PatchEmbedParams, PatchMergeCache, PatchMergeParams, LN_EPS,
};
use crate::rng::Rng;
use crate::spectral::{filter_enhance_backward, filter_enhance_forward, FilterWeights};
use crate::tensor::{
    layer_norm_backward, layer_norm_cached, softmax_lastaxis, ComplexTensor, LnCache, RealTensor,
};

/// Reduction ratio of the squeeze/excitation ablation variant.
pub const SE_REDUCTION: usize = 16;

/// Channel width per attention head used by the stock configurations.
pub const CHANNELS_PER_HEAD: usize = 32;

// ── Configuration ─────────────────────────────────────────────────────────

/// Which core the filter blocks carry (the attention blocks are identical in
/// all variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No filter core at all: filter blocks collapse to `FFN(LN(x)) + x`.
    Win,
    /// Spectral filtering without a channel gate.
    Fwnet,
    /// Spectral filtering gated by squeeze/excitation.
    FwnetSe,
    /// Spectral filtering gated by efficient channel attention.
    FwnetEca,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "win" => Ok(Variant::Win),
            "fwnet" => Ok(Variant::Fwnet),
            "fwnet_se" => Ok(Variant::FwnetSe),
            "fwnet_eca" => Ok(Variant::FwnetEca),
            other => Err(FwError::Arg(format!(
                "unknown variant {other:?} (expected win, fwnet, fwnet_se or fwnet_eca)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Win => "win",
            Variant::Fwnet => "fwnet",
            Variant::FwnetSe => "fwnet_se",
            Variant::FwnetEca => "fwnet_eca",
        }
    }
}

/// Architecture hyper-parameters. Widths double and resolutions halve from
/// one stage to the next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Patch size of the embedding (4 in the stock configurations).
    pub patch: usize,
    /// Token width of the first stage.
    pub embed_dim: usize,
    /// Blocks per stage; every entry must be even.
    pub depths: Vec<usize>,
    /// Attention window size.
    pub window: usize,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    /// FFN expansion ratio.
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub variant: Variant,
    /// Input images are `image_size x image_size x 3`.
    pub image_size: usize,
}

impl ModelConfig {
    /// Stock 4-stage layout shared by the tiny/small/base sizes.
    fn stock(depth3: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            patch: 4,
            embed_dim: 96,
            depths: vec![2, 2, depth3, 2],
            window: 7,
            heads: vec![3, 6, 12, 24],
            ffn_ratio: 4,
            num_classes,
            variant: Variant::FwnetEca,
            image_size: 224,
        }
    }

    pub fn tiny(num_classes: usize) -> ModelConfig {
        Self::stock(6, num_classes)
    }

    pub fn small(num_classes: usize) -> ModelConfig {
        Self::stock(12, num_classes)
    }

    pub fn base(num_classes: usize) -> ModelConfig {
        Self::stock(18, num_classes)
    }

    /// Two-stage desk-scale configuration used by the toy training run.
    pub fn mini(num_classes: usize) -> ModelConfig {
        ModelConfig {
            patch: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            window: 7,
            heads: vec![1, 2],
            ffn_ratio: 4,
            num_classes,
            variant: Variant::FwnetEca,
            image_size: 56,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Token width of stage `s`: `embed_dim * 2^s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Token-grid side length of stage `s`.
    pub fn stage_resolution(&self, s: usize) -> usize {
        (self.image_size / self.patch) >> s
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.embed_dim == 0 || self.window == 0 {
            config_err!("patch size, embed dim and window must all be positive");
        }
        if self.num_classes < 2 {
            config_err!("need at least 2 classes, got {}", self.num_classes);
        }
        if self.ffn_ratio == 0 {
            config_err!("ffn_ratio must be at least 1");
        }
        if self.depths.is_empty() {
            config_err!("at least one stage is required");
        }
        if self.heads.len() != self.depths.len() {
            config_err!(
                "{} head counts for {} stages",
                self.heads.len(),
                self.depths.len()
            );
        }
        if self.image_size % self.patch != 0 {
            config_err!(
                "image size {} is not divisible by patch size {}",
                self.image_size,
                self.patch
            );
        }
        let mut res = self.image_size / self.patch;
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            if depth == 0 || depth % 2 != 0 {
                config_err!("stage {s} depth {depth} must be even (blocks alternate in pairs)");
            }
            if res == 0 || res % self.window != 0 {
                config_err!(
                    "stage {s} resolution {res} is not divisible by window {}",
                    self.window
                );
            }
            let dim = self.stage_dim(s);
            if heads == 0 || dim % heads != 0 {
                config_err!("stage {s} width {dim} cannot split into {heads} heads");
            }
            if s + 1 < self.depths.len() {
                if res % 2 != 0 {
                    config_err!("stage {s} resolution {res} cannot be halved for merging");
                }
                res /= 2;
            }
        }
        Ok(())
    }
}

// ── Parameter containers ──────────────────────────────────────────────────

/// Scale and shift of one layer norm.
#[derive(Debug, Clone)]
pub struct LnParams {
    pub gamma: RealTensor,
    pub beta: RealTensor,
}

impl LnParams {
    pub fn zeros(channels: usize) -> LnParams {
        LnParams {
            gamma: RealTensor::zeros(&[channels]),
            beta: RealTensor::zeros(&[channels]),
        }
    }
}

/// One attention block: `x_hat = WMSA(LN(x)) + x; out = FFN(LN(x_hat)) + x_hat`.
#[derive(Debug, Clone)]
pub struct AttnBlockParams {
    pub norm1: LnParams,
    pub attn: AttentionParams,
    pub norm2: LnParams,
    pub ffn: FfnParams,
}

/// One filter block: `x_hat = Gate(Filter(LN(x))) + x; out = FFN(LN(x_hat)) + x_hat`.
///
/// The optional pieces encode the model variant: the `win` ablation drops the
/// whole first sub-block (`norm1`/`fe` and both gates are `None`), `fwnet`
/// keeps the filter but no gate, and the `_se`/`_eca` variants add exactly
/// one of the two gates.
#[derive(Debug, Clone)]
pub struct FilterBlockParams {
    pub norm1: Option<LnParams>,
    pub fe: Option<FilterWeights>,
    pub eca: Option<EcaParams>,
    pub se: Option<SeParams>,
    pub norm2: LnParams,
    pub ffn: FfnParams,
}

/// A block at even index within a stage mixes tokens spatially through
/// windowed attention; at odd index through spectral filtering.
#[derive(Debug, Clone)]
pub enum Block {
    Attn(AttnBlockParams),
    Filter(FilterBlockParams),
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<Block>,
}

/// Full parameter set. The same type doubles as the gradient container.
#[derive(Debug, Clone)]
pub struct FwNetModel {
    pub config: ModelConfig,
    pub patch_embed: PatchEmbedParams,
    pub stages: Vec<Stage>,
    /// Patch-merge projections between consecutive stages (`stages - 1`).
    pub merges: Vec<PatchMergeParams>,
    pub head: HeadParams,
}

/// How [`build_model`] fills parameter tensors.
enum Init<'a> {
    Zeros,
    Random(&'a mut Rng),
}

impl Init<'_> {
    fn weight(&mut self, t: &mut RealTensor) {
        if let Init::Random(rng) = self {
            for v in t.data_mut() {
                *v = rng.trunc_normal(0.02);
            }
        }
    }

    fn ln(&mut self, p: &mut LnParams) {
        if let Init::Random(_) = self {
            for v in p.gamma.data_mut() {
                *v = 1.0;
            }
        }
    }

    /// Near-identity spectral weights: `1 + noise` so filtering starts as a
    /// slightly perturbed identity.
    fn filter(&mut self, w: &mut FilterWeights) {
        if let Init::Random(rng) = self {
            for v in w.data_mut().data_mut() {
                let re = rng.trunc_normal(0.02);
                let im = rng.trunc_normal(0.02);
                *v = Complex64::new(1.0 + re, im);
            }
        }
    }
}

fn build_model(config: &ModelConfig, mut init: Init) -> Result<FwNetModel> {
    config.validate()?;
    let mut patch_embed = PatchEmbedParams::zeros(config.patch, 3, config.embed_dim)?;
    init.weight(&mut patch_embed.w);
    if let Init::Random(_) = init {
        for v in patch_embed.gamma.data_mut() {
            *v = 1.0;
        }
    }

    let mut stages = Vec::new();
    for (s, &depth) in config.depths.iter().enumerate() {
        let dim = config.stage_dim(s);
        let res = config.stage_resolution(s);
        let mut blocks = Vec::new();
        for j in 0..depth {
            let mut norm2 = LnParams::zeros(dim);
            init.ln(&mut norm2);
            let mut ffn = FfnParams::zeros(dim, config.ffn_ratio)?;
            init.weight(&mut ffn.w1);
            init.weight(&mut ffn.w2);
            if j % 2 == 0 {
                let mut norm1 = LnParams::zeros(dim);
                init.ln(&mut norm1);
                let mut attn = AttentionParams::zeros(dim, config.heads[s], config.window)?;
                init.weight(&mut attn.w_qkv);
                init.weight(&mut attn.w_out);
                init.weight(&mut attn.bias_table);
                blocks.push(Block::Attn(AttnBlockParams {
                    norm1,
                    attn,
                    norm2,
                    ffn,
                }));
            } else {
                let (norm1, fe) = if config.variant == Variant::Win {
                    (None, None)
                } else {
                    let mut norm1 = LnParams::zeros(dim);
                    init.ln(&mut norm1);
                    let mut fe = FilterWeights::zeros(res, res, dim);
                    init.filter(&mut fe);
                    (Some(norm1), Some(fe))
                };
                let eca = if config.variant == Variant::FwnetEca {
                    let mut eca = EcaParams::zeros();
                    init.weight(&mut eca.kernel);
                    Some(eca)
                } else {
                    None
                };
                let se = if config.variant == Variant::FwnetSe {
                    let mut se = SeParams::zeros(dim, SE_REDUCTION)?;
                    init.weight(&mut se.w1);
                    init.weight(&mut se.w2);
                    Some(se)
                } else {
                    None
                };
                blocks.push(Block::Filter(FilterBlockParams {
                    norm1,
                    fe,
                    eca,
                    se,
                    norm2,
                    ffn,
                }));
            }
        }
        stages.push(Stage { blocks });
    }

    let mut merges = Vec::new();
    for s in 0..config.num_stages().saturating_sub(1) {
        let mut m = PatchMergeParams::zeros(config.stage_dim(s));
        if let Init::Random(_) = init {
            for v in m.gamma.data_mut() {
                *v = 1.0;
            }
        }
        init.weight(&mut m.w);
        merges.push(m);
    }

    let last_dim = config.stage_dim(config.num_stages() - 1);
    let mut head = HeadParams::zeros(last_dim, config.num_classes);
    if let Init::Random(_) = init {
        for v in head.gamma.data_mut() {
            *v = 1.0;
        }
    }
    init.weight(&mut head.w);

    Ok(FwNetModel {
        config: config.clone(),
        patch_embed,
        stages,
        merges,
        head,
    })
}

/// Deterministic random initialization: truncated-normal weights (sigma
/// 0.02), zero biases, unit norm scales, near-identity filter weights.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<FwNetModel> {
    let mut rng = Rng::seed_from_u64(seed);
    build_model(config, Init::Random(&mut rng))
}

/// A model of the given architecture with every parameter zero (used as a
/// shell to fill when loading checkpoints).
pub fn zeros_model(config: &ModelConfig) -> Result<FwNetModel> {
    build_model(config, Init::Zeros)
}

/// A structurally identical model with every parameter zero — the gradient
/// container matching `model`.
pub fn zeros_like(model: &FwNetModel) -> FwNetModel {
    zeros_model(&model.config).expect("an existing model's config is valid")
}

// ── Named traversal ───────────────────────────────────────────────────────

/// Borrowed view of one parameter tensor.
pub enum TensorRef<'a> {
    Real(&'a RealTensor),
    Complex(&'a ComplexTensor),
}

/// Mutable view of one parameter tensor.
pub enum TensorMut<'a> {
    Real(&'a mut RealTensor),
    Complex(&'a mut ComplexTensor),
}

impl TensorRef<'_> {
    /// Number of underlying scalars (a complex entry counts as two).
    pub fn num_scalars(&self) -> usize {
        match self {
            TensorRef::Real(t) => t.len(),
            TensorRef::Complex(t) => 2 * t.len(),
        }
    }
}

impl FwNetModel {
    /// Every parameter tensor with its canonical name, in a fixed order
    /// shared with [`named_tensors_mut`] (a unit test enforces the match).
    pub fn named_tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out: Vec<(String, TensorRef<'_>)> = Vec::new();
        out.push(("patch_embed.w".into(), TensorRef::Real(&self.patch_embed.w)));
        out.push(("patch_embed.b".into(), TensorRef::Real(&self.patch_embed.b)));
        out.push((
            "patch_embed.gamma".into(),
            TensorRef::Real(&self.patch_embed.gamma),
        ));
        out.push((
            "patch_embed.beta".into(),
            TensorRef::Real(&self.patch_embed.beta),
        ));
        for (s, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                let base = format!("stages.{s}.blocks.{j}");
                match block {
                    Block::Attn(b) => {
                        out.push((format!("{base}.norm1.gamma"), TensorRef::Real(&b.norm1.gamma)));
                        out.push((format!("{base}.norm1.beta"), TensorRef::Real(&b.norm1.beta)));
                        out.push((format!("{base}.attn.w_qkv"), TensorRef::Real(&b.attn.w_qkv)));
                        out.push((format!("{base}.attn.b_qkv"), TensorRef::Real(&b.attn.b_qkv)));
                        out.push((format!("{base}.attn.w_out"), TensorRef::Real(&b.attn.w_out)));
                        out.push((format!("{base}.attn.b_out"), TensorRef::Real(&b.attn.b_out)));
                        out.push((
                            format!("{base}.attn.bias_table"),
                            TensorRef::Real(&b.attn.bias_table),
                        ));
                        out.push((format!("{base}.norm2.gamma"), TensorRef::Real(&b.norm2.gamma)));
                        out.push((format!("{base}.norm2.beta"), TensorRef::Real(&b.norm2.beta)));
                        out.push((format!("{base}.ffn.w1"), TensorRef::Real(&b.ffn.w1)));
                        out.push((format!("{base}.ffn.b1"), TensorRef::Real(&b.ffn.b1)));
                        out.push((format!("{base}.ffn.w2"), TensorRef::Real(&b.ffn.w2)));
                        out.push((format!("{base}.ffn.b2"), TensorRef::Real(&b.ffn.b2)));
                    }
                    Block::Filter(b) => {
                        if let Some(n) = &b.norm1 {
                            out.push((format!("{base}.norm1.gamma"), TensorRef::Real(&n.gamma)));
                            out.push((format!("{base}.norm1.beta"), TensorRef::Real(&n.beta)));
                        }
                        if let Some(fe) = &b.fe {
                            out.push((format!("{base}.fe.weights"), TensorRef::Complex(fe.data())));
                        }
                        if let Some(eca) = &b.eca {
                            out.push((format!("{base}.eca.kernel"), TensorRef::Real(&eca.kernel)));
                        }
                        if let Some(se) = &b.se {
                            out.push((format!("{base}.se.w1"), TensorRef::Real(&se.w1)));
                            out.push((format!("{base}.se.b1"), TensorRef::Real(&se.b1)));
                            out.push((format!("{base}.se.w2"), TensorRef::Real(&se.w2)));
                            out.push((format!("{base}.se.b2"), TensorRef::Real(&se.b2)));
                        }
                        out.push((format!("{base}.norm2.gamma"), TensorRef::Real(&b.norm2.gamma)));
                        out.push((format!("{base}.norm2.beta"), TensorRef::Real(&b.norm2.beta)));
                        out.push((format!("{base}.ffn.w1"), TensorRef::Real(&b.ffn.w1)));
                        out.push((format!("{base}.ffn.b1"), TensorRef::Real(&b.ffn.b1)));
                        out.push((format!("{base}.ffn.w2"), TensorRef::Real(&b.ffn.w2)));
                        out.push((format!("{base}.ffn.b2"), TensorRef::Real(&b.ffn.b2)));
                    }
                }
            }
        }
        for (s, m) in self.merges.iter().enumerate() {
            out.push((format!("merges.{s}.gamma"), TensorRef::Real(&m.gamma)));
            out.push((format!("merges.{s}.beta"), TensorRef::Real(&m.beta)));
            out.push((format!("merges.{s}.w"), TensorRef::Real(&m.w)));
        }
        out.push(("head.gamma".into(), TensorRef::Real(&self.head.gamma)));
        out.push(("head.beta".into(), TensorRef::Real(&self.head.beta)));
        out.push(("head.w".into(), TensorRef::Real(&self.head.w)));
        out.push(("head.b".into(), TensorRef::Real(&self.head.b)));
        out
    }

    /// Mutable variant of [`named_tensors`]; same names, same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out: Vec<(String, TensorMut<'_>)> = Vec::new();
        out.push(("patch_embed.w".into(), TensorMut::Real(&mut self.patch_embed.w)));
        out.push(("patch_embed.b".into(), TensorMut::Real(&mut self.patch_embed.b)));
        out.push((
            "patch_embed.gamma".into(),
            TensorMut::Real(&mut self.patch_embed.gamma),
        ));
        out.push((
            "patch_embed.beta".into(),
            TensorMut::Real(&mut self.patch_embed.beta),
        ));
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                let base = format!("stages.{s}.blocks.{j}");
                match block {
                    Block::Attn(b) => {
                        out.push((format!("{base}.norm1.gamma"), TensorMut::Real(&mut b.norm1.gamma)));
                        out.push((format!("{base}.norm1.beta"), TensorMut::Real(&mut b.norm1.beta)));
                        out.push((format!("{base}.attn.w_qkv"), TensorMut::Real(&mut b.attn.w_qkv)));
                        out.push((format!("{base}.attn.b_qkv"), TensorMut::Real(&mut b.attn.b_qkv)));
                        out.push((format!("{base}.attn.w_out"), TensorMut::Real(&mut b.attn.w_out)));
                        out.push((format!("{base}.attn.b_out"), TensorMut::Real(&mut b.attn.b_out)));
                        out.push((
                            format!("{base}.attn.bias_table"),
                            TensorMut::Real(&mut b.attn.bias_table),
                        ));
                        out.push((format!("{base}.norm2.gamma"), TensorMut::Real(&mut b.norm2.gamma)));
                        out.push((format!("{base}.norm2.beta"), TensorMut::Real(&mut b.norm2.beta)));
                        out.push((format!("{base}.ffn.w1"), TensorMut::Real(&mut b.ffn.w1)));
                        out.push((format!("{base}.ffn.b1"), TensorMut::Real(&mut b.ffn.b1)));
                        out.push((format!("{base}.ffn.w2"), TensorMut::Real(&mut b.ffn.w2)));
                        out.push((format!("{base}.ffn.b2"), TensorMut::Real(&mut b.ffn.b2)));
                    }
                    Block::Filter(b) => {
                        if let Some(n) = &mut b.norm1 {
                            out.push((format!("{base}.norm1.gamma"), TensorMut::Real(&mut n.gamma)));
                            out.push((format!("{base}.norm1.beta"), TensorMut::Real(&mut n.beta)));
                        }
                        if let Some(fe) = &mut b.fe {
                            out.push((format!("{base}.fe.weights"), TensorMut::Complex(fe.data_mut())));
                        }
                        if let Some(eca) = &mut b.eca {
                            out.push((format!("{base}.eca.kernel"), TensorMut::Real(&mut eca.kernel)));
                        }
                        if let Some(se) = &mut b.se {
                            out.push((format!("{base}.se.w1"), TensorMut::Real(&mut se.w1)));
                            out.push((format!("{base}.se.b1"), TensorMut::Real(&mut se.b1)));
                            out.push((format!("{base}.se.w2"), TensorMut::Real(&mut se.w2)));
                            out.push((format!("{base}.se.b2"), TensorMut::Real(&mut se.b2)));
                        }
                        out.push((format!("{base}.norm2.gamma"), TensorMut::Real(&mut b.norm2.gamma)));
                        out.push((format!("{base}.norm2.beta"), TensorMut::Real(&mut b.norm2.beta)));
                        out.push((format!("{base}.ffn.w1"), TensorMut::Real(&mut b.ffn.w1)));
                        out.push((format!("{base}.ffn.b1"), TensorMut::Real(&mut b.ffn.b1)));
                        out.push((format!("{base}.ffn.w2"), TensorMut::Real(&mut b.ffn.w2)));
                        out.push((format!("{base}.ffn.b2"), TensorMut::Real(&mut b.ffn.b2)));
                    }
                }
            }
        }
        for (s, m) in self.merges.iter_mut().enumerate() {
            out.push((format!("merges.{s}.gamma"), TensorMut::Real(&mut m.gamma)));
            out.push((format!("merges.{s}.beta"), TensorMut::Real(&mut m.beta)));
            out.push((format!("merges.{s}.w"), TensorMut::Real(&mut m.w)));
        }
        out.push(("head.gamma".into(), TensorMut::Real(&mut self.head.gamma)));
        out.push(("head.beta".into(), TensorMut::Real(&mut self.head.beta)));
        out.push(("head.w".into(), TensorMut::Real(&mut self.head.w)));
        out.push(("head.b".into(), TensorMut::Real(&mut self.head.b)));
        out
    }

    /// Total number of scalar parameters (complex entries count as two).
    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.num_scalars()).sum()
    }

    /// All parameters flattened into one vector, complex entries as
    /// consecutive (re, im) pairs, in [`named_tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_scalars());
        for (_, t) in self.named_tensors() {
            match t {
                TensorRef::Real(t) => flat.extend_from_slice(t.data()),
                TensorRef::Complex(t) => {
                    for v in t.data() {
                        flat.push(v.re);
                        flat.push(v.im);
                    }
                }
            }
        }
        flat
    }

    /// Inverse of [`to_flat`].
    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            shape_err!(
                "flat vector holds {} scalars, model needs {}",
                flat.len(),
                self.num_scalars()
            );
        }
        let mut pos = 0;
        for (_, t) in self.named_tensors_mut() {
            match t {
                TensorMut::Real(t) => {
                    let n = t.len();
                    t.data_mut().copy_from_slice(&flat[pos..pos + n]);
                    pos += n;
                }
                TensorMut::Complex(t) => {
                    for v in t.data_mut() {
                        *v = Complex64::new(flat[pos], flat[pos + 1]);
                        pos += 2;
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Block forward / backward ──────────────────────────────────────────────

pub struct AttnBlockCache {
    ln1: LnCache,
    grid: WindowGrid,
    wmsa: WmsaCache,
    xhat: RealTensor,
    ln2: LnCache,
    normed2: RealTensor,
    ffn: FfnCache,
}

/// `x_hat = WMSA(LN(x)) + x; out = FFN(LN(x_hat)) + x_hat`.
pub fn attn_block_forward(x: &RealTensor, p: &AttnBlockParams) -> Result<RealTensor> {
    Ok(attn_block_forward_cached(x, p)?.0)
}

pub fn attn_block_forward_cached(
    x: &RealTensor,
    p: &AttnBlockParams,
) -> Result<(RealTensor, AttnBlockCache)> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (normed1, ln1) = layer_norm_cached(x, &p.norm1.gamma, &p.norm1.beta, LN_EPS)?;
    let grid = window_partition(&normed1, p.attn.window)?;
    let (attn_grid, wmsa) = wmsa_forward_cached(&grid, &p.attn)?;
    let mut xhat = window_reverse(&attn_grid, h, w)?;
    for (v, &xv) in xhat.data_mut().iter_mut().zip(x.data()) {
        *v += xv;
    }
    let (normed2, ln2) = layer_norm_cached(&xhat, &p.norm2.gamma, &p.norm2.beta, LN_EPS)?;
    let (ffn_out, ffn) = ffn_forward_cached(&normed2, &p.ffn)?;
    let mut out = ffn_out;
    for (v, &xv) in out.data_mut().iter_mut().zip(xhat.data()) {
        *v += xv;
    }
    Ok((
        out,
        AttnBlockCache {
            ln1,
            grid,
            wmsa,
            xhat,
            ln2,
            normed2,
            ffn,
        },
    ))
}

pub fn attn_block_backward_with_cache(
    p: &AttnBlockParams,
    cache: &AttnBlockCache,
    grad_out: &RealTensor,
) -> Result<(RealTensor, AttnBlockParams)> {
    let (h, w) = (cache.xhat.shape()[1], cache.xhat.shape()[2]);
    // out = ffn(normed2) + xhat.
    let (dnormed2, dffn) = ffn_backward_with_cache(&cache.normed2, &p.ffn, grad_out, &cache.ffn)?;
    let (dxhat_ln, dgamma2, dbeta2) = layer_norm_backward(&cache.ln2, &p.norm2.gamma, &dnormed2)?;
    let mut dxhat = grad_out.clone();
    for (v, &d) in dxhat.data_mut().iter_mut().zip(dxhat_ln.data()) {
        *v += d;
    }
    // xhat = reverse(wmsa(partition(normed1))) + x.
    let dattn_grid = window_partition(&dxhat, p.attn.window)?;
    let (dgrid, dattn) = wmsa_backward_with_cache(&cache.grid, &p.attn, &dattn_grid, &cache.wmsa)?;
    let dnormed1 = window_reverse(&dgrid, h, w)?;
    let (dx_ln, dgamma1, dbeta1) = layer_norm_backward(&cache.ln1, &p.norm1.gamma, &dnormed1)?;
    let mut dx = dxhat;
    for (v, &d) in dx.data_mut().iter_mut().zip(dx_ln.data()) {
        *v += d;
    }
    Ok((
        dx,
        AttnBlockParams {
            norm1: LnParams {
                gamma: dgamma1,
                beta: dbeta1,
            },
            attn: dattn,
            norm2: LnParams {
                gamma: dgamma2,
                beta: dbeta2,
            },
            ffn: dffn,
        },
    ))
}

pub struct FilterBlockCache {
    /// Present when the block has a filter core (every variant except win).
    core: Option<FilterCoreCache>,
    ln2: LnCache,
    normed2: RealTensor,
    ffn: FfnCache,
}

struct FilterCoreCache {
    ln1: LnCache,
    normed1: RealTensor,
    filtered: RealTensor,
    eca: Option<EcaCache>,
    se: Option<SeCache>,
}

/// `x_hat = Gate(Filter(LN(x))) + x; out = FFN(LN(x_hat)) + x_hat`, where
/// the gate and even the whole core are optional (see [`FilterBlockParams`]).
pub fn filter_block_forward(x: &RealTensor, p: &FilterBlockParams) -> Result<RealTensor> {
    Ok(filter_block_forward_cached(x, p)?.0)
}

pub fn filter_block_forward_cached(
    x: &RealTensor,
    p: &FilterBlockParams,
) -> Result<(RealTensor, FilterBlockCache)> {
    let (xhat, core) = match (&p.norm1, &p.fe) {
        (Some(norm1), Some(fe)) => {
            let (normed1, ln1) = layer_norm_cached(x, &norm1.gamma, &norm1.beta, LN_EPS)?;
            let filtered = filter_enhance_forward(&normed1, fe)?;
            let (gated, eca, se) = match (&p.eca, &p.se) {
                (Some(eca), None) => {
                    let (g, c) = eca_forward_cached(&filtered, eca)?;
                    (g, Some(c), None)
                }
                (None, Some(se)) => {
                    let (g, c) = se_forward_cached(&filtered, se)?;
                    (g, None, Some(c))
                }
                (None, None) => (filtered.clone(), None, None),
                (Some(_), Some(_)) => {
                    return Err(FwError::Config(
                        "a filter block cannot carry both channel gates".into(),
                    ))
                }
            };
            let mut xhat = gated;
            for (v, &xv) in xhat.data_mut().iter_mut().zip(x.data()) {
                *v += xv;
            }
            (
                xhat,
                Some(FilterCoreCache {
                    ln1,
                    normed1,
                    filtered,
                    eca,
                    se,
                }),
            )
        }
        (None, None) => (x.clone(), None),
        _ => {
            return Err(FwError::Config(
                "filter block must carry norm1 and filter weights together".into(),
            ))
        }
    };
    let (normed2, ln2) = layer_norm_cached(&xhat, &p.norm2.gamma, &p.norm2.beta, LN_EPS)?;
    let (ffn_out, ffn) = ffn_forward_cached(&normed2, &p.ffn)?;
    let mut out = ffn_out;
    for (v, &xv) in out.data_mut().iter_mut().zip(xhat.data()) {
        *v += xv;
    }
    Ok((
        out,
        FilterBlockCache {
            core,
            ln2,
            normed2,
            ffn,
        },
    ))
}

pub fn filter_block_backward_with_cache(
    p: &FilterBlockParams,
    cache: &FilterBlockCache,
    grad_out: &RealTensor,
) -> Result<(RealTensor, FilterBlockParams)> {
    let (dnormed2, dffn) = ffn_backward_with_cache(&cache.normed2, &p.ffn, grad_out, &cache.ffn)?;
    let (dxhat_ln, dgamma2, dbeta2) = layer_norm_backward(&cache.ln2, &p.norm2.gamma, &dnormed2)?;
    let mut dxhat = grad_out.clone();
    for (v, &d) in dxhat.data_mut().iter_mut().zip(dxhat_ln.data()) {
        *v += d;
    }

    let norm2_grad = LnParams {
        gamma: dgamma2,
        beta: dbeta2,
    };
    let Some(core) = &cache.core else {
        // win variant: x_hat = x, so the input gradient is just dxhat.
        return Ok((
            dxhat,
            FilterBlockParams {
                norm1: None,
                fe: None,
                eca: None,
                se: None,
                norm2: norm2_grad,
                ffn: dffn,
            },
        ));
    };
    let (norm1, fe) = (
        p.norm1.as_ref().expect("cache and params agree"),
        p.fe.as_ref().expect("cache and params agree"),
    );

    // x_hat = gate(filtered) + x.
    let (dfiltered, deca, dse) = match (&p.eca, &p.se) {
        (Some(eca), None) => {
            let c = core.eca.as_ref().expect("cache and params agree");
            let (d, g) = eca_backward_with_cache(&core.filtered, eca, &dxhat, c)?;
            (d, Some(g), None)
        }
        (None, Some(se)) => {
            let c = core.se.as_ref().expect("cache and params agree");
            let (d, g) = se_backward_with_cache(&core.filtered, se, &dxhat, c)?;
            (d, None, Some(g))
        }
        _ => (dxhat.clone(), None, None),
    };
    let (dnormed1, dfe) = filter_enhance_backward(&core.normed1, fe, &dfiltered)?;
    let (dx_ln, dgamma1, dbeta1) = layer_norm_backward(&core.ln1, &norm1.gamma, &dnormed1)?;
    let mut dx = dxhat;
    for (v, &d) in dx.data_mut().iter_mut().zip(dx_ln.data()) {
        *v += d;
    }
    Ok((
        dx,
        FilterBlockParams {
            norm1: Some(LnParams {
                gamma: dgamma1,
                beta: dbeta1,
            }),
            fe: Some(FilterWeights::from_tensor(dfe, fe.width())?),
            eca: deca,
            se: dse,
            norm2: norm2_grad,
            ffn: dffn,
        },
    ))
}

// ── Whole-model forward / backward ────────────────────────────────────────

enum BlockCache {
    Attn(AttnBlockCache),
    Filter(FilterBlockCache),
}

struct StageCache {
    blocks: Vec<BlockCache>,
    /// Block outputs, kept for attribution maps.
    outputs: Vec<RealTensor>,
    merge: Option<(RealTensor, PatchMergeCache)>,
}

/// Every intermediate needed for one backward pass (and for attribution).
pub struct ModelCache {
    embed: PatchEmbedCache,
    stages: Vec<StageCache>,
    head_input: RealTensor,
    head: HeadCache,
}

impl ModelCache {
    /// Output feature map of block `j` of stage `s` from the cached forward.
    pub fn block_output(&self, stage: usize, block: usize) -> Option<&RealTensor> {
        self.stages.get(stage)?.outputs.get(block)
    }
}

/// `[B, S, S, 3] -> [B, num_classes]` logits.
pub fn model_forward(img: &RealTensor, model: &FwNetModel) -> Result<RealTensor> {
    Ok(model_forward_cached(img, model)?.0)
}

pub fn model_forward_cached(
    img: &RealTensor,
    model: &FwNetModel,
) -> Result<(RealTensor, ModelCache)> {
    let cfg = &model.config;
    if img.rank() != 4
        || img.shape()[1] != cfg.image_size
        || img.shape()[2] != cfg.image_size
        || img.shape()[3] != 3
    {
        shape_err!(
            "model expects [B, {0}, {0}, 3] images, got {1:?}",
            cfg.image_size,
            img.shape()
        );
    }
    let (tokens, embed) = embed_forward_cached(img, &model.patch_embed)?;
    let mut x = tokens;
    let mut stage_caches = Vec::new();
    for (s, stage) in model.stages.iter().enumerate() {
        let mut blocks = Vec::new();
        let mut outputs = Vec::new();
        for block in &stage.blocks {
            let (y, cache) = match block {
                Block::Attn(p) => {
                    let (y, c) = attn_block_forward_cached(&x, p)?;
                    (y, BlockCache::Attn(c))
                }
                Block::Filter(p) => {
                    let (y, c) = filter_block_forward_cached(&x, p)?;
                    (y, BlockCache::Filter(c))
                }
            };
            blocks.push(cache);
            outputs.push(y.clone());
            x = y;
        }
        let merge = if s + 1 < model.stages.len() {
            let input = x.clone();
            let (y, c) = merge_forward_cached(&x, &model.merges[s])?;
            x = y;
            Some((input, c))
        } else {
            None
        };
        stage_caches.push(StageCache {
            blocks,
            outputs,
            merge,
        });
    }
    let head_input = x.clone();
    let (logits, head) = head_forward_cached(&x, &model.head)?;
    Ok((
        logits,
        ModelCache {
            embed,
            stages: stage_caches,
            head_input,
            head,
        },
    ))
}

/// Gradients that [`model_backward_from_dlogits`] produces besides the
/// parameter gradients.
pub struct BackwardTrace {
    /// d(loss)/d(image).
    pub dimage: RealTensor,
    /// d(loss)/d(block output), indexed `[stage][block]` — the counterpart
    /// of [`ModelCache::block_output`] for attribution maps.
    pub block_output_grads: Vec<Vec<RealTensor>>,
}

/// Reverse pass from a gradient at the logits. `img` must be the tensor the
/// cache was built from.
pub fn model_backward_from_dlogits(
    img: &RealTensor,
    model: &FwNetModel,
    cache: &ModelCache,
    dlogits: &RealTensor,
) -> Result<(FwNetModel, BackwardTrace)> {
    let mut grads = zeros_like(model);
    let (mut dx, dhead) =
        head_backward_with_cache(&cache.head_input, &model.head, dlogits, &cache.head)?;
    grads.head = dhead;

    let mut block_output_grads: Vec<Vec<RealTensor>> = model
        .stages
        .iter()
        .map(|s| Vec::with_capacity(s.blocks.len()))
        .collect();
    for s in (0..model.stages.len()).rev() {
        let stage_cache = &cache.stages[s];
        if let Some((merge_input, merge_cache)) = &stage_cache.merge {
            let (d, dmerge) =
                merge_backward_with_cache(merge_input, &model.merges[s], &dx, merge_cache)?;
            grads.merges[s] = dmerge;
            dx = d;
        }
        let blocks = &model.stages[s].blocks;
        for j in (0..blocks.len()).rev() {
            block_output_grads[s].insert(0, dx.clone());
            match (&blocks[j], &stage_cache.blocks[j]) {
                (Block::Attn(p), BlockCache::Attn(c)) => {
                    let (d, dp) = attn_block_backward_with_cache(p, c, &dx)?;
                    if let Block::Attn(g) = &mut grads.stages[s].blocks[j] {
                        *g = dp;
                    }
                    dx = d;
                }
                (Block::Filter(p), BlockCache::Filter(c)) => {
                    let (d, dp) = filter_block_backward_with_cache(p, c, &dx)?;
                    if let Block::Filter(g) = &mut grads.stages[s].blocks[j] {
                        *g = dp;
                    }
                    dx = d;
                }
                _ => unreachable!("cache kind always matches the block kind"),
            }
        }
    }
    let (dimage, dembed) =
        embed_backward_with_cache(img, &model.patch_embed, &dx, &cache.embed)?;
    grads.patch_embed = dembed;
    Ok((
        grads,
        BackwardTrace {
            dimage,
            block_output_grads,
        },
    ))
}

/// Mean softmax cross-entropy over the batch. Returns the loss and
/// d(loss)/d(logits) = `(softmax - one_hot) / B`.
pub fn cross_entropy(logits: &RealTensor, labels: &[usize]) -> Result<(f64, RealTensor)> {
    if logits.rank() != 2 {
        shape_err!("cross_entropy expects [B, classes] logits, got {:?}", logits.shape());
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        shape_err!("{} labels for a batch of {}", labels.len(), b);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        arg_err!("label {bad} out of range for {k} classes");
    }
    let probs = softmax_lastaxis(logits);
    let mut loss = 0.0;
    for (bi, row) in logits.data().chunks(k).enumerate() {
        // log-sum-exp with max subtraction, evaluated from the raw logits so
        // the loss does not round through the softmax.
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[bi]];
    }
    loss /= b as f64;
    let mut dlogits = probs;
    for (bi, row) in dlogits.data_mut().chunks_mut(k).enumerate() {
        row[labels[bi]] -= 1.0;
        for v in row.iter_mut() {
            *v /= b as f64;
        }
    }
    Ok((loss, dlogits))
}

/// Loss and full parameter gradients for one labelled batch.
pub fn model_backward(
    img: &RealTensor,
    labels: &[usize],
    model: &FwNetModel,
) -> Result<(f64, FwNetModel)> {
    let (logits, cache) = model_forward_cached(img, model)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    let (grads, _) = model_backward_from_dlogits(img, model, &cache, &dlogits)?;
    Ok((loss, grads))
}

// ── Optimizer ─────────────────────────────────────────────────────────────

/// Decoupled-weight-decay adaptive optimizer over the flattened parameters.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &FwNetModel, lr: f64, betas: (f64, f64), weight_decay: f64) -> AdamW {
        let n = model.num_scalars();
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, model: &mut FwNetModel, grads: &FwNetModel) -> Result<()> {
        let mut p = model.to_flat();
        let g = grads.to_flat();
        if p.len() != self.m.len() || g.len() != self.m.len() {
            shape_err!(
                "optimizer state covers {} scalars, got model {} / grads {}",
                self.m.len(),
                p.len(),
                g.len()
            );
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
        model.copy_from_flat(&p)
    }
}

// ── Tests ─────────────────────────────────────────────────────────────────
