//! On-disk formats: single tensors, whole-model checkpoints, and PGM images.
//!
//! Everything is little-endian and platform independent. Tensor payloads are
//! stored as f32 (computation stays f64 in memory; saving rounds once).
//!
//! Tensor file layout:
//!
//! ```text
//! "FWT1" | dtype: u32 (1 = f32) | ndim: u32 | dims: ndim x u64 | payload: f32 x prod(dims)
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "FWCK" | config_len: u32 | config text (key=value lines)
//!        | per tensor: name_len: u32 | name | tensor file body
//! ```
//!
//! Complex tensors ride along as real tensors with a trailing axis of
//! length 2 (re, im). Saving the same model twice produces byte-identical
//! files, and save -> load -> save is a fixed point.

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{format_err, FwError, Result};
use crate::model::{zeros_model, FwNetModel, ModelConfig, TensorMut, TensorRef, Variant};
use crate::tensor::RealTensor;

const TENSOR_MAGIC: &[u8; 4] = b"FWT1";
const CHECKPOINT_MAGIC: &[u8; 4] = b"FWCK";
const DTYPE_F32: u32 = 1;

// ── Byte-level helpers ────────────────────────────────────────────────────

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        format_err!(
            "truncated file: wanted {n} bytes for {what}, {} left",
            bytes.len() - *pos
        );
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let s = take(bytes, pos, 4, what)?;
    Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
}

fn read_u64(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u64> {
    let s = take(bytes, pos, 8, what)?;
    Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
}

// ── Tensor files ──────────────────────────────────────────────────────────

/// Append one tensor in file format (f32 payload) to `out`.
pub fn encode_tensor_into(t: &RealTensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_tensor(t: &RealTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 4 * t.len());
    encode_tensor_into(t, &mut out);
    out
}

/// Parse one tensor starting at `*pos`, advancing `*pos` past it.
pub fn decode_tensor_from(bytes: &[u8], pos: &mut usize) -> Result<RealTensor> {
    let magic = take(bytes, pos, 4, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        format_err!("bad tensor magic {magic:?} (expected {TENSOR_MAGIC:?})");
    }
    let dtype = read_u32(bytes, pos, "dtype")?;
    if dtype != DTYPE_F32 {
        format_err!("unsupported dtype code {dtype} (only 1 = f32 is defined)");
    }
    let ndim = read_u32(bytes, pos, "ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for i in 0..ndim {
        let d = read_u64(bytes, pos, "dimension")? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| FwError::Format(format!("dimension {i} overflows the element count")))?;
        shape.push(d);
    }
    let payload = take(bytes, pos, 4 * len, "payload")?;
    let mut data = Vec::with_capacity(len);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
    }
    RealTensor::from_vec(&shape, data)
}

/// Parse a standalone tensor file; trailing bytes are rejected.
pub fn decode_tensor(bytes: &[u8]) -> Result<RealTensor> {
    let mut pos = 0;
    let t = decode_tensor_from(bytes, &mut pos)?;
    if pos != bytes.len() {
        format_err!("{} trailing bytes after the tensor payload", bytes.len() - pos);
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &RealTensor) -> Result<RealTensor> {
    fs::write(path, encode_tensor(t))?;
    // Hand back the f32-rounded values actually stored, so callers that keep
    // using the tensor see exactly what a reader will see.
    let rounded: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
    RealTensor::from_vec(t.shape(), rounded)
}

pub fn read_tensor(path: &Path) -> Result<RealTensor> {
    decode_tensor(&fs::read(path)?)
}

// ── Config text ───────────────────────────────────────────────────────────

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| FwError::Format(format!("bad {key} entry {part:?}")))
        })
        .collect()
}

pub(crate) fn config_to_text(c: &ModelConfig) -> String {
    format!(
        "patch={}\nembed_dim={}\ndepths={}\nwindow={}\nheads={}\nffn_ratio={}\nnum_classes={}\nvariant={}\nimage_size={}\n",
        c.patch,
        c.embed_dim,
        join(&c.depths),
        c.window,
        join(&c.heads),
        c.ffn_ratio,
        c.num_classes,
        c.variant.name(),
        c.image_size,
    )
}

pub(crate) fn config_from_text(text: &str) -> Result<ModelConfig> {
    let mut patch = None;
    let mut embed_dim = None;
    let mut depths = None;
    let mut window = None;
    let mut heads = None;
    let mut ffn_ratio = None;
    let mut num_classes = None;
    let mut variant = None;
    let mut image_size = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| FwError::Format(format!("config line without '=': {line:?}")))?;
        let uint = |what: &str| -> Result<usize> {
            value
                .parse::<usize>()
                .map_err(|_| FwError::Format(format!("bad {what} value {value:?}")))
        };
        match key {
            "patch" => patch = Some(uint("patch")?),
            "embed_dim" => embed_dim = Some(uint("embed_dim")?),
            "depths" => depths = Some(parse_list(value, "depths")?),
            "window" => window = Some(uint("window")?),
            "heads" => heads = Some(parse_list(value, "heads")?),
            "ffn_ratio" => ffn_ratio = Some(uint("ffn_ratio")?),
            "num_classes" => num_classes = Some(uint("num_classes")?),
            "variant" => variant = Some(Variant::parse(value)?),
            "image_size" => image_size = Some(uint("image_size")?),
            other => format_err!("unknown config key {other:?}"),
        }
    }
    let missing = |what: &str| FwError::Format(format!("config is missing {what}"));
    Ok(ModelConfig {
        patch: patch.ok_or_else(|| missing("patch"))?,
        embed_dim: embed_dim.ok_or_else(|| missing("embed_dim"))?,
        depths: depths.ok_or_else(|| missing("depths"))?,
        window: window.ok_or_else(|| missing("window"))?,
        heads: heads.ok_or_else(|| missing("heads"))?,
        ffn_ratio: ffn_ratio.ok_or_else(|| missing("ffn_ratio"))?,
        num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
        variant: variant.ok_or_else(|| missing("variant"))?,
        image_size: image_size.ok_or_else(|| missing("image_size"))?,
    })
}

// ── Checkpoints ───────────────────────────────────────────────────────────

/// Complex tensors are stored with a trailing (re, im) axis.
fn complex_to_real_view(shape: &[usize], data: &[Complex64]) -> RealTensor {
    let mut s = shape.to_vec();
    s.push(2);
    let mut flat = Vec::with_capacity(2 * data.len());
    for v in data {
        flat.push(v.re);
        flat.push(v.im);
    }
    RealTensor::from_vec(&s, flat).expect("shape matches data")
}

pub fn encode_checkpoint(model: &FwNetModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let config = config_to_text(&model.config);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, tensor) in model.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match tensor {
            TensorRef::Real(t) => encode_tensor_into(t, &mut out),
            TensorRef::Complex(t) => {
                encode_tensor_into(&complex_to_real_view(t.shape(), t.data()), &mut out)
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FwNetModel> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, 4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        format_err!("bad checkpoint magic {magic:?} (expected {CHECKPOINT_MAGIC:?})");
    }
    let config_len = read_u32(bytes, &mut pos, "config length")? as usize;
    let config_bytes = take(bytes, &mut pos, config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| FwError::Format("config block is not UTF-8".into()))?;
    let config = config_from_text(config_text)?;
    let mut model = zeros_model(&config)?;

    // Read every record first, then fill the shell by name.
    let mut records: Vec<(String, RealTensor)> = Vec::new();
    while pos < bytes.len() {
        let name_len = read_u32(bytes, &mut pos, "tensor name length")? as usize;
        let name_bytes = take(bytes, &mut pos, name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| FwError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if records.iter().any(|(n, _)| n == &name) {
            format_err!("duplicate tensor record {name:?}");
        }
        let tensor = decode_tensor_from(bytes, &mut pos)?;
        records.push((name, tensor));
    }

    let mut filled = 0usize;
    let mut expected = 0usize;
    for (name, slot) in model.named_tensors_mut() {
        expected += 1;
        let Some((_, stored)) = records.iter().find(|(n, _)| n == &name) else {
            format_err!("checkpoint is missing tensor {name:?}");
        };
        match slot {
            TensorMut::Real(t) => {
                if stored.shape() != t.shape() {
                    format_err!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        stored.shape(),
                        t.shape()
                    );
                }
                t.data_mut().copy_from_slice(stored.data());
            }
            TensorMut::Complex(t) => {
                let mut want = t.shape().to_vec();
                want.push(2);
                if stored.shape() != want.as_slice() {
                    format_err!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        stored.shape(),
                        want
                    );
                }
                for (v, pair) in t.data_mut().iter_mut().zip(stored.data().chunks(2)) {
                    *v = Complex64::new(pair[0], pair[1]);
                }
            }
        }
        filled += 1;
    }
    if records.len() != expected {
        format_err!(
            "checkpoint holds {} tensors, model has {} (extra records present)",
            records.len(),
            expected
        );
    }
    debug_assert_eq!(filled, expected);
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &FwNetModel) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FwNetModel> {
    decode_checkpoint(&fs::read(path)?)
}

// ── PGM images ────────────────────────────────────────────────────────────

/// Binary 8-bit grayscale PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        format_err!(
            "{} pixels do not fill a {width}x{height} image",
            pixels.len()
        );
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

/// Parse a P5 file produced by [`encode_pgm`] (whitespace-separated header,
/// maxval 255): returns (width, height, pixels).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header_err = || FwError::Format("not a P5 grayscale image".into());
    // Header: "P5", width, height, maxval, one whitespace byte, then payload.
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(header_err());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err())?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(header_err());
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // single whitespace separating header and payload
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != width * height {
        format_err!(
            "P5 payload holds {} bytes, header promises {width}x{height}",
            payload.len()
        );
    }
    Ok((width, height, payload.to_vec()))
}

// ── Tests ─────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> RealTensor {
        let n: usize = shape.iter().product();
        RealTensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn tensor_bytes_match_the_documented_layout() {
        let t = RealTensor::from_vec(&[1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t);
        let mut expect = Vec::new();
        expect.extend_from_slice(b"FWT1");
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expect, "byte layout is part of the file contract");
    }

    #[test]
    fn tensor_round_trip_is_exact_at_f32() {
        let mut rng = Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, &[2, 3, 4]);
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (&a, &b) in t.data().iter().zip(back.data()) {
            assert_eq!(a as f32 as f64, b, "values round through f32 exactly once");
        }
    }

    #[test]
    fn tensor_decode_rejects_malformed_input() {
        let t = RealTensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode_tensor(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_tensor(&bad_magic).is_err(), "wrong magic");

        let mut bad_dtype = good.clone();
        bad_dtype[4] = 7;
        assert!(decode_tensor(&bad_dtype).is_err(), "unknown dtype code");

        assert!(decode_tensor(&good[..good.len() - 1]).is_err(), "truncated payload");

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_tensor(&trailing).is_err(), "trailing bytes");

        assert!(decode_tensor(&[]).is_err(), "empty file");
    }

    #[test]
    fn tensor_file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fwt");
        let mut rng = Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, &[4, 5]);
        let rounded = write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), rounded.shape());
        assert_eq!(back.data(), rounded.data());
    }

    #[test]
    fn config_text_round_trips() {
        for cfg in [
            ModelConfig::mini(4),
            ModelConfig::tiny(1000),
            {
                let mut c = ModelConfig::mini(7);
                c.variant = Variant::Win;
                c
            },
        ] {
            let text = config_to_text(&cfg);
            let back = config_from_text(&text).unwrap();
            assert_eq!(back, cfg, "config should survive the text round trip:\n{text}");
        }
        assert!(config_from_text("patch=4").is_err(), "missing keys");
        assert!(config_from_text("patch=4\nbogus=1").is_err(), "unknown key");
        assert!(config_from_text("patch=x").is_err(), "non-numeric value");
    }

    #[test]
    fn checkpoint_round_trip_preserves_the_model_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fwck");
        let model = init_params(&ModelConfig::mini(4), 77).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        let original = model.to_flat();
        let back = loaded.to_flat();
        assert_eq!(original.len(), back.len());
        for (i, (&a, &b)) in original.iter().zip(&back).enumerate() {
            assert_eq!(a as f32 as f64, b, "scalar {i} must round through f32 exactly");
        }
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.fwck");
        let second = dir.path().join("b.fwck");
        let model = init_params(&ModelConfig::mini(4), 5).unwrap();
        save_checkpoint(&first, &model).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(&second, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap(),
            "second generation file must be byte-identical"
        );
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = init_params(&ModelConfig::mini(4), 9).unwrap();
        let good = encode_checkpoint(&model);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        assert!(decode_checkpoint(&bad_magic).is_err(), "wrong magic");

        // Flip the first byte of the first tensor name ("patch_embed.w").
        let config_len = 4 + 4 + config_to_text(&model.config).len();
        let name_start = config_len + 4;
        let mut bad_name = good.clone();
        bad_name[name_start] = b'q';
        let err = decode_checkpoint(&bad_name).unwrap_err().to_string();
        assert!(
            err.contains("missing") || err.contains("extra"),
            "renamed record should surface as missing/extra, got: {err}"
        );

        // Drop the last record: a required tensor disappears.
        let truncated = &good[..good.len() - 20];
        assert!(decode_checkpoint(truncated).is_err(), "truncated checkpoint");
    }

    #[test]
    fn checkpoint_rejects_duplicate_records() {
        let model = init_params(&ModelConfig::mini(4), 3).unwrap();
        let mut bytes = encode_checkpoint(&model);
        // Append a copy of an existing record: name "head.b" + its tensor.
        let name = b"head.b";
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        encode_tensor_into(&model.head.b, &mut bytes);
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "got: {err}");
    }

    #[test]
    fn complex_weights_survive_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.fwck");
        let model = init_params(&ModelConfig::mini(4), 21).unwrap();
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let fe = |m: &FwNetModel| match &m.stages[0].blocks[1] {
            crate::model::Block::Filter(b) => b.fe.as_ref().unwrap().data().data().to_vec(),
            _ => panic!("block (0,1) must be a filter block"),
        };
        let a = fe(&model);
        let b = fe(&loaded);
        assert!(a.iter().any(|v| v.im != 0.0), "fixture should have nonzero phases");
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.re as f32 as f64, y.re);
            assert_eq!(x.im as f32 as f64, y.im);
        }
    }

    #[test]
    fn pgm_layout_and_round_trip() {
        let pixels: Vec<u8> = (0..6).map(|v| v * 40).collect();
        let bytes = encode_pgm(3, 2, &pixels).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), "P5\n3 2\n255\n".len() + 6);
        let (w, h, back) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, pixels);
        assert!(encode_pgm(3, 3, &pixels).is_err(), "pixel count mismatch");
        assert!(decode_pgm(b"P6\n1 1\n255\nx").is_err(), "wrong format tag");
        assert!(decode_pgm(b"P5\n2 2\n255\nxy").is_err(), "short payload");
    }

    #[test]
    fn pgm_writes_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        write_pgm(&path, 2, 2, &[0, 128, 200, 255]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (w, h, pixels) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h, pixels), (2, 2, vec![0, 128, 200, 255]));
    }
}
