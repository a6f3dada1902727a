//! Allocation-only (`no_std` + `alloc`) core of a joint-embedding predictive
//! architecture for audio.
//!
//! The crate contains every numerical piece of the pipeline and nothing that
//! touches the operating system:
//!
//! - [`dsp`]: resampling, duration fitting, log-mel spectrograms and patch grids.
//! - [`masking`]: per-batch mask ratios and per-example random masks.
//! - [`autodiff`]: a tensor-level reverse-mode tape.
//! - [`vit`]: the Vision Transformer used by both encoders and the predictor.
//! - [`jepa`]: the model, its loss, the EMA target, AdamW and the training step.
//! - [`probe`]: clip embeddings, kNN classification and linear probing.
//!
//! File formats, WAV decoding, configuration and the command line live in the
//! companion `audio-jepa` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod dsp;
mod error;
pub mod jepa;
pub mod masking;
pub mod probe;
mod real;
pub mod rng;
mod tensor;
pub mod vit;

pub use error::{Error, Result, Stage};
pub use real::Real;
pub use tensor::Tensor;
