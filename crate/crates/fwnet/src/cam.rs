//! Gradient-weighted class activation maps.
//!
//! For a chosen block's output `A` (a `[h, w, c]` token map) and the
//! gradient `G` of one class logit with respect to it, the heat map is
//! `relu(sum_c mean_hw(G[..., c]) * A[..., c])`, min-max normalised to
//! `0..=255` and nearest-neighbour upsampled back to image resolution. It
//! highlights which spatial positions pushed the chosen logit up, which is
//! how we compare where the attention blocks and the spectral-filter blocks
//! look.

use crate::error::{arg_err, Result};
use crate::model::{model_backward_from_dlogits, model_forward_cached, FwNetModel};
use crate::tensor::RealTensor;

/// One attribution map plus the prediction it explains.
#[derive(Debug, Clone)]
pub struct Cam {
    /// Class the map attributes (predicted class unless overridden).
    pub class: usize,
    /// Raw logits of the input.
    pub logits: Vec<f64>,
    /// Row-major `size x size` heat map, 0 = cold, 255 = hot.
    pub heat: Vec<u8>,
    /// Side length of the upsampled map (the input image size).
    pub size: usize,
    /// Token-grid side length the map was computed at.
    pub grid: usize,
}

/// Min-max normalise to `0..=255`; a constant map becomes all zeros.
pub fn normalize_to_u8(map: &[f64]) -> Vec<u8> {
    let min = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() || max <= min {
        return vec![0; map.len()];
    }
    map.iter()
        .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
        .collect()
}

/// Nearest-neighbour upsample of a row-major `grid x grid` map.
pub fn upsample_nearest(src: &[f64], grid: usize, size: usize) -> Result<Vec<f64>> {
    if src.len() != grid * grid || grid == 0 || size < grid {
        arg_err!(
            "cannot upsample a {}-element map as {grid}x{grid} to {size}x{size}",
            src.len()
        );
    }
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = src[(r * grid / size) * grid + (c * grid / size)];
        }
    }
    Ok(out)
}

/// Fraction of pixels whose heat exceeds half of the maximum possible value
/// (i.e. strictly above 127.5 after normalisation). A proxy for how spread
/// out the block's response is.
pub fn response_area_fraction(heat: &[u8]) -> f64 {
    if heat.is_empty() {
        return 0.0;
    }
    heat.iter().filter(|&&p| p >= 128).count() as f64 / heat.len() as f64
}

/// Compute the attribution map of `model`'s block `(stage, block)` for one
/// `[S, S, 3]` image. `class` overrides the attributed class (defaults to
/// the argmax prediction).
pub fn grad_cam(
    model: &FwNetModel,
    image: &RealTensor,
    stage: usize,
    block: usize,
    class: Option<usize>,
) -> Result<Cam> {
    let cfg = &model.config;
    if image.rank() != 3 {
        arg_err!("expected one [S, S, 3] image, got shape {:?}", image.shape());
    }
    if stage >= cfg.num_stages() || block >= cfg.depths[stage] {
        arg_err!(
            "block ({stage}, {block}) out of range for depths {:?}",
            cfg.depths
        );
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batched = RealTensor::from_vec(&shape, image.data().to_vec())?;

    let (logits, cache) = model_forward_cached(&batched, model)?;
    let k = logits.shape()[1];
    let mut target = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[target] {
            target = i;
        }
    }
    if let Some(c) = class {
        if c >= k {
            arg_err!("class {c} out of range for {k} classes");
        }
        target = c;
    }
    let mut dlogits = RealTensor::zeros(&[1, k]);
    dlogits.data_mut()[target] = 1.0;
    let (_, trace) = model_backward_from_dlogits(&batched, model, &cache, &dlogits)?;

    let acts = cache
        .block_output(stage, block)
        .ok_or_else(|| crate::error::FwError::Arg(format!("no cached block ({stage}, {block})")))?;
    let grads = &trace.block_output_grads[stage][block];
    let (h, w, c) = (acts.shape()[1], acts.shape()[2], acts.shape()[3]);

    // Channel weights: spatial mean of the gradient.
    let mut weights = vec![0.0; c];
    for (i, &g) in grads.data().iter().enumerate() {
        weights[i % c] += g;
    }
    for wgt in weights.iter_mut() {
        *wgt /= (h * w) as f64;
    }

    // Weighted channel sum, rectified.
    let mut map = vec![0.0; h * w];
    for (pos, px) in acts.data().chunks(c).enumerate() {
        let s: f64 = px.iter().zip(&weights).map(|(a, w)| a * w).sum();
        map[pos] = s.max(0.0);
    }

    debug_assert_eq!(h, w, "square token grids only");
    let size = image.shape()[0];
    let up = upsample_nearest(&map, h, size)?;
    Ok(Cam {
        class: target,
        logits: logits.data().to_vec(),
        heat: normalize_to_u8(&up),
        size,
        grid: h,
    })
}

// ── Tests ─────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, zeros_model, ModelConfig, Variant};

    fn micro_config() -> ModelConfig {
        ModelConfig {
            patch: 4,
            embed_dim: 8,
            depths: vec![2],
            window: 2,
            heads: vec![2],
            ffn_ratio: 2,
            num_classes: 3,
            variant: Variant::FwnetEca,
            image_size: 8,
        }
    }

    fn sample_image(seed: u64) -> RealTensor {
        let mut rng = crate::rng::Rng::seed_from_u64(seed);
        let mut img = RealTensor::zeros(&[8, 8, 3]);
        for v in img.data_mut() {
            *v = rng.normal();
        }
        img
    }

    #[test]
    fn normalization_maps_extremes_to_0_and_255() {
        assert_eq!(normalize_to_u8(&[0.0, 1.0, 3.0]), vec![0, 85, 255]);
        assert_eq!(normalize_to_u8(&[5.0, 5.0, 5.0]), vec![0, 0, 0], "flat map guard");
        assert_eq!(normalize_to_u8(&[-2.0, 0.0]), vec![0, 255]);
    }

    #[test]
    fn nearest_upsampling_replicates_blocks() {
        let up = upsample_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 4).unwrap();
        #[rustfmt::skip]
        let expect = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up, expect);
        assert!(upsample_nearest(&[1.0; 3], 2, 4).is_err(), "length mismatch");
        assert!(upsample_nearest(&[1.0; 4], 2, 1).is_err(), "cannot downsample");
    }

    #[test]
    fn response_area_counts_above_half_max() {
        assert_eq!(response_area_fraction(&[255, 128, 127, 0]), 0.5);
        assert_eq!(response_area_fraction(&[0, 0]), 0.0);
        assert_eq!(response_area_fraction(&[]), 0.0);
    }

    #[test]
    fn maps_cover_the_image_and_use_the_full_range() {
        let model = init_params(&micro_config(), 11).unwrap();
        let img = sample_image(1);
        for block in 0..2 {
            let cam = grad_cam(&model, &img, 0, block, None).unwrap();
            assert_eq!(cam.size, 8);
            assert_eq!(cam.grid, 2, "8px image, 4px patches");
            assert_eq!(cam.heat.len(), 64);
            assert_eq!(cam.logits.len(), 3);
            assert!(cam.class < 3);
            assert_eq!(
                *cam.heat.iter().max().unwrap(),
                255,
                "a non-degenerate map touches the top of the range"
            );
        }
    }

    #[test]
    fn zero_model_yields_the_guard_map() {
        let model = zeros_model(&micro_config()).unwrap();
        let cam = grad_cam(&model, &sample_image(2), 0, 0, None).unwrap();
        assert!(cam.heat.iter().all(|&p| p == 0), "no signal, no heat");
        assert_eq!(cam.class, 0, "ties resolve to the first class");
    }

    #[test]
    fn class_override_is_respected_and_checked() {
        let model = init_params(&micro_config(), 11).unwrap();
        let img = sample_image(3);
        let cam = grad_cam(&model, &img, 0, 1, Some(2)).unwrap();
        assert_eq!(cam.class, 2);
        assert!(grad_cam(&model, &img, 0, 1, Some(3)).is_err(), "class out of range");
    }

    #[test]
    fn out_of_range_blocks_are_rejected() {
        let model = init_params(&micro_config(), 11).unwrap();
        let img = sample_image(4);
        assert!(grad_cam(&model, &img, 1, 0, None).is_err(), "no stage 1");
        assert!(grad_cam(&model, &img, 0, 2, None).is_err(), "no block 2");
        let flat = RealTensor::zeros(&[8, 8]);
        assert!(grad_cam(&model, &flat, 0, 0, None).is_err(), "needs channels");
    }

    #[test]
    fn maps_are_deterministic_and_class_sensitive() {
        let model = init_params(&micro_config(), 11).unwrap();
        let img = sample_image(5);
        let a = grad_cam(&model, &img, 0, 0, Some(0)).unwrap();
        let b = grad_cam(&model, &img, 0, 0, Some(0)).unwrap();
        assert_eq!(a.heat, b.heat);
        let c = grad_cam(&model, &img, 0, 0, Some(1)).unwrap();
        assert_ne!(a.heat, c.heat, "different classes attribute differently");
    }
}
