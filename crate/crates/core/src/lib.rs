//! Blind face inpainting on a small f64 autograd engine.
//!
//! The pipeline detects corrupted regions with a frequency-guided
//! transformer ([`maskdetect`]), then restores them with a top-down
//! refinement generator ([`inpaint`]) trained against a spectrally
//! normalized PatchGAN ([`adversary`]).

pub mod adversary;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod frequency;
pub mod harness;
pub mod image;
pub mod inpaint;
pub mod losses;
pub mod maskdetect;
pub mod metrics;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
