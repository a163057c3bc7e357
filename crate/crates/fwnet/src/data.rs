//! Synthetic sinusoidal-grating dataset.
//!
//! Each class is a fixed 2D spatial frequency: class k's images are
//! `cos(2*pi*(u_k*row + v_k*col)/S + phase)` with a per-image random phase,
//! plus white Gaussian noise (sigma 0.1), replicated onto three identical
//! channels. The classes differ only in where their energy sits in the
//! frequency plane, which makes the spectral filtering path directly
//! diagnostic: a correct model can separate them with frequency weights
//! alone.
//!
//! Generation is deterministic: image `i` draws from an independent stream
//! derived from `(seed, i)`, so datasets are bitwise reproducible and images
//! may be generated in any order.

use std::fs;
use std::path::Path;

use crate::error::{arg_err, format_err, FwError, Result};
use crate::io::{read_tensor, write_tensor};
use crate::rng::Rng;
use crate::tensor::RealTensor;

/// Images must tile the toy model's 4-pixel patches and, after patch
/// embedding, its 7-token attention windows.
pub const SIZE_MULTIPLE: usize = 28;

/// The four grating orientations: horizontal, vertical, diagonal,
/// anti-diagonal (as (row frequency, column frequency) pairs).
pub const NUM_CLASSES: usize = 4;

/// In-memory dataset: images `[N, S, S, 3]` with one label per image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: RealTensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[1]
    }

    /// Copy the selected images into one batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(RealTensor, Vec<usize>)> {
        let s = self.image_size();
        let stride = s * s * 3;
        let mut out = RealTensor::zeros(&[indices.len(), s, s, 3]);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                arg_err!("index {i} out of range for {} images", self.len());
            }
            out.data_mut()[row * stride..(row + 1) * stride]
                .copy_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok((out, labels))
    }
}

/// The generating frequency pair of a class, scaled to the image size.
/// The base frequency is `S/8 - 1`, far from both DC and Nyquist.
pub fn class_frequency(class: usize, size: usize) -> Result<(usize, usize)> {
    validate_size(size)?;
    let f = size / 8 - 1;
    match class {
        0 => Ok((0, f)),
        1 => Ok((f, 0)),
        2 => Ok((f, f)),
        3 => Ok((size - f, f)),
        _ => Err(FwError::Arg(format!(
            "class {class} out of range (classes 0..{NUM_CLASSES} are defined)"
        ))),
    }
}

fn validate_size(size: usize) -> Result<()> {
    if size == 0 || size % SIZE_MULTIPLE != 0 {
        arg_err!("image size {size} must be a positive multiple of {SIZE_MULTIPLE}");
    }
    Ok(())
}

/// Noise level added on top of the unit-amplitude grating.
pub const NOISE_SIGMA: f64 = 0.1;

/// One grating image `[S, S, 3]` drawn from the given stream.
fn synth_image(size: usize, class: usize, rng: &mut Rng) -> Result<RealTensor> {
    let (u, v) = class_frequency(class, size)?;
    let phase = rng.uniform() * std::f64::consts::TAU;
    let mut img = RealTensor::zeros(&[size, size, 3]);
    let s = size as f64;
    for row in 0..size {
        for col in 0..size {
            let angle =
                std::f64::consts::TAU * (u as f64 * row as f64 + v as f64 * col as f64) / s;
            let value = (angle + phase).cos() + NOISE_SIGMA * rng.normal();
            let base = (row * size + col) * 3;
            for c in 0..3 {
                img.data_mut()[base + c] = value;
            }
        }
    }
    Ok(img)
}

/// Generate `classes x per_class` gratings, class-major, deterministically.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    validate_size(size)?;
    if classes == 0 || classes > NUM_CLASSES {
        arg_err!("classes must be in 1..={NUM_CLASSES}, got {classes}");
    }
    if per_class == 0 {
        arg_err!("need at least one image per class");
    }
    let n = classes * per_class;
    let mut images = RealTensor::zeros(&[n, size, size, 3]);
    let mut labels = Vec::with_capacity(n);
    let stride = size * size * 3;
    for class in 0..classes {
        for k in 0..per_class {
            let index = class * per_class + k;
            let mut rng = Rng::derive(seed, index as u64);
            let img = synth_image(size, class, &mut rng)?;
            images.data_mut()[index * stride..(index + 1) * stride].copy_from_slice(img.data());
            labels.push(class);
        }
    }
    Ok(Dataset { images, labels })
}

// ── Disk layout ───────────────────────────────────────────────────────────

fn image_filename(index: usize) -> String {
    format!("img_{index:05}.fwt")
}

/// Write one tensor file per image plus `labels.csv` (filename,label rows).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = data.image_size();
    let stride = s * s * 3;
    let mut csv = String::new();
    for i in 0..data.len() {
        let name = image_filename(i);
        let img = RealTensor::from_vec(
            &[s, s, 3],
            data.images.data()[i * stride..(i + 1) * stride].to_vec(),
        )?;
        write_tensor(&dir.join(&name), &img)?;
        csv.push_str(&format!("{name},{}\n", data.labels[i]));
    }
    fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let csv = fs::read_to_string(dir.join("labels.csv"))?;
    let mut names = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in csv.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, label) = line.split_once(',').ok_or_else(|| {
            FwError::Format(format!("labels.csv line {}: no comma in {line:?}", lineno + 1))
        })?;
        let label: usize = label.trim().parse().map_err(|_| {
            FwError::Format(format!("labels.csv line {}: bad label {label:?}", lineno + 1))
        })?;
        names.push(name.to_string());
        labels.push(label);
    }
    if names.is_empty() {
        format_err!("labels.csv lists no images");
    }
    let first = read_tensor(&dir.join(&names[0]))?;
    if first.rank() != 3 || first.shape()[2] != 3 || first.shape()[0] != first.shape()[1] {
        format_err!("image {} has shape {:?}, expected [S, S, 3]", names[0], first.shape());
    }
    let s = first.shape()[0];
    let stride = s * s * 3;
    let mut images = RealTensor::zeros(&[names.len(), s, s, 3]);
    images.data_mut()[..stride].copy_from_slice(first.data());
    for (i, name) in names.iter().enumerate().skip(1) {
        let img = read_tensor(&dir.join(name))?;
        if img.shape() != first.shape() {
            format_err!(
                "image {name} has shape {:?}, expected {:?} like the rest",
                img.shape(),
                first.shape()
            );
        }
        images.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(img.data());
    }
    Ok(Dataset { images, labels })
}

// ── Tests ─────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::rfft2;

    #[test]
    fn generation_is_seed_deterministic() {
        let a = synth_dataset(4, 2, 56, 42).unwrap();
        let b = synth_dataset(4, 2, 56, 42).unwrap();
        assert_eq!(a.images.data(), b.images.data(), "same seed, same bits");
        assert_eq!(a.labels, b.labels);
        let c = synth_dataset(4, 2, 56, 43).unwrap();
        assert_ne!(a.images.data(), c.images.data(), "different seed, different noise");
    }

    #[test]
    fn shapes_and_labels_follow_the_layout() {
        let d = synth_dataset(3, 5, 56, 1).unwrap();
        assert_eq!(d.images.shape(), &[15, 56, 56, 3]);
        assert_eq!(d.len(), 15);
        let expect: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat(c).take(5)).collect();
        assert_eq!(d.labels, expect, "images are class-major");
    }

    #[test]
    fn channels_are_replicated_copies() {
        let d = synth_dataset(4, 1, 56, 7).unwrap();
        let data = d.images.data();
        for px in data.chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn pixel_values_are_bounded_gratings_plus_noise() {
        let d = synth_dataset(4, 2, 56, 3).unwrap();
        for &v in d.images.data() {
            assert!(v.abs() < 1.0 + 10.0 * NOISE_SIGMA, "value {v} is implausibly large");
        }
        // The grating dominates: the per-image standard deviation is close
        // to that of a unit cosine (1/sqrt(2)), not of pure noise.
        let stride = 56 * 56 * 3;
        for i in 0..d.len() {
            let img = &d.images.data()[i * stride..(i + 1) * stride];
            let mean = img.iter().sum::<f64>() / img.len() as f64;
            let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / img.len() as f64;
            assert!(
                (var.sqrt() - (0.5f64 + NOISE_SIGMA * NOISE_SIGMA).sqrt()).abs() < 0.05,
                "image {i} std {} far from expected",
                var.sqrt()
            );
        }
    }

    #[test]
    fn every_class_peaks_at_its_generating_frequency() {
        let size = 56;
        let d = synth_dataset(4, 3, size, 11).unwrap();
        let stride = size * size * 3;
        for i in 0..d.len() {
            // Single channel view of image i.
            let mut chan = RealTensor::zeros(&[1, size, size, 1]);
            for (j, px) in d.images.data()[i * stride..(i + 1) * stride]
                .chunks(3)
                .enumerate()
            {
                chan.data_mut()[j] = px[0];
            }
            let spec = rfft2(&chan).unwrap();
            let wh = size / 2 + 1;
            let mut best = (0usize, 0usize);
            let mut best_mag = -1.0;
            for u in 0..size {
                for v in 0..wh {
                    let mag = spec.data().data()[u * wh + v].norm();
                    // The DC bin only carries noise and the grating's mean
                    // offset; compare signal bins.
                    if (u, v) == (0, 0) {
                        continue;
                    }
                    if mag > best_mag {
                        best_mag = mag;
                        best = (u, v);
                    }
                }
            }
            let expect = class_frequency(d.labels[i], size).unwrap();
            // In columns the half-spectrum keeps in full (v = 0 and Nyquist),
            // the conjugate bin (S-u, v) carries the same magnitude; either
            // twin counts as the generating frequency.
            let twin = if expect.1 == 0 || expect.1 == size / 2 {
                ((size - expect.0) % size, expect.1)
            } else {
                expect
            };
            assert!(
                best == expect || best == twin,
                "image {i} (class {}) peaks at {best:?}, generated at {expect:?}",
                d.labels[i]
            );
        }
    }

    #[test]
    fn class_frequencies_are_distinct_and_in_range() {
        let size = 56;
        let mut seen = Vec::new();
        for c in 0..NUM_CLASSES {
            let (u, v) = class_frequency(c, size).unwrap();
            assert!(u < size && v <= size / 2, "bin ({u},{v}) must be representable");
            assert!(!seen.contains(&(u, v)), "classes must use distinct bins");
            seen.push((u, v));
        }
        assert!(class_frequency(4, size).is_err());
        assert!(class_frequency(0, 57).is_err(), "size must be a multiple of 28");
        assert!(class_frequency(0, 0).is_err());
    }

    #[test]
    fn bad_arguments_are_rejected() {
        assert!(synth_dataset(0, 1, 56, 0).is_err());
        assert!(synth_dataset(5, 1, 56, 0).is_err(), "only 4 classes are defined");
        assert!(synth_dataset(4, 0, 56, 0).is_err());
        assert!(synth_dataset(4, 1, 55, 0).is_err());
    }

    #[test]
    fn disk_round_trip_preserves_images_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_dataset(4, 2, 28, 9).unwrap();
        write_dataset(dir.path(), &d).unwrap();

        let csv = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        assert_eq!(csv.lines().count(), 8, "one row per image");
        assert!(csv.starts_with("img_00000.fwt,0\n"));

        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.images.shape(), d.images.shape());
        for (&a, &b) in d.images.data().iter().zip(back.images.data()) {
            assert_eq!(a as f32 as f64, b, "pixels round through f32 exactly once");
        }
    }

    #[test]
    fn gather_builds_batches_in_index_order() {
        let d = synth_dataset(4, 2, 28, 5).unwrap();
        let (batch, labels) = d.gather(&[3, 0, 6]).unwrap();
        assert_eq!(batch.shape(), &[3, 28, 28, 3]);
        assert_eq!(labels, vec![d.labels[3], d.labels[0], d.labels[6]]);
        let stride = 28 * 28 * 3;
        assert_eq!(
            &batch.data()[..stride],
            &d.images.data()[3 * stride..4 * stride]
        );
        assert!(d.gather(&[8]).is_err(), "out of range index");
    }

    #[test]
    fn load_rejects_inconsistent_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err(), "no labels.csv");
        std::fs::write(dir.path().join("labels.csv"), "img_00000.fwt,0\n").unwrap();
        assert!(load_dataset(dir.path()).is_err(), "listed image missing");
        std::fs::write(dir.path().join("labels.csv"), "").unwrap();
        assert!(load_dataset(dir.path()).is_err(), "empty listing");
    }
}
