//! Core library for a Fourier-filtered windowed-attention image classifier.
//!
//! The model alternates two token mixers inside a hierarchical (Swin-style)
//! stage layout: windowed multi-head self-attention, and a spectral filter
//! (2D real FFT -> learnable complex mask -> inverse FFT) followed by a
//! lightweight channel-attention gate. Everything is implemented from first
//! principles in f64 with hand-written backward passes, so the crate doubles
//! as a reference implementation: each kernel is checked against naive
//! oracles and finite differences in the test suite.
//!
//! Layout:
//! - [`tensor`]: dense row-major real/complex tensors and pointwise/linear ops
//! - [`spectral`]: mixed-radix FFT, half-spectrum 2D transforms, filter layer
//! - [`attention`]: window partitioning and windowed self-attention
//! - [`channels`]: channel-attention gates (1D-conv and squeeze-excite)
//! - [`layers`]: patch embedding, patch merging, FFN, classifier head
//! - [`model`]: full network assembly, forward/backward, init, AdamW
//! - [`accounting`]: closed-form parameter and FLOP counts
//! - [`gradcheck`]: finite-difference verification harness
//! - [`io`], [`data`], [`train`], [`cam`], [`bench`], [`cli`]: tooling

pub mod accounting;
pub mod attention;
pub mod bench;
pub mod cam;
pub mod channels;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{FwError, Result};
