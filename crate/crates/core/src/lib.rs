//! Desk-scale contrastive vision-language laboratory.
//!
//! The crate trains small CLIP-style image/text encoder pairs on synthetic
//! data and evaluates them with frozen-feature probes, zero-shot retrieval,
//! and feature visualization. All compute is `f64` on a single thread, so
//! every run is bit-for-bit reproducible from its seed and config.
//!
//! Rough layering, bottom up:
//!
//! - [`tensor`]: tape-based reverse-mode autodiff on `ndarray`
//! - [`imgproc`]: image resize / crop / blur primitives
//! - [`model`]: vision transformer (2-D RoPE, attention pooling), text
//!   transformer, parameter store, checkpoints
//! - [`augment`], [`optim`], [`losses`]: training ingredients
//! - [`synth`]: synthetic image/caption/video/segmentation generators
//! - [`train`], [`distill`], [`video`], [`spatial`]: the four training stages
//! - [`probe`], [`zeroshot`], [`viz`]: frozen-feature evaluation
//! - [`config`], [`metrics`], [`pipeline`]: run plumbing shared with the CLI

pub mod augment;
pub mod config;
pub mod distill;
pub mod error;
pub mod imgproc;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod video;
pub mod viz;
pub mod zeroshot;

pub use error::{Error, Result};
