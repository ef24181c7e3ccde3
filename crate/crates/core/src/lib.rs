//! Class-confined adversarial attacks against two-stage object detectors.
//!
//! The crate picks one object type in an image (the most frequent or the most
//! confident detected class), builds a fixed binary mask from the boxes of that
//! type, and runs masked gradient steps until every box of that type is
//! relabelled, leaving the pixels of every other object untouched. A small
//! trainable two-stage detector, a procedural scene generator, and the
//! evaluation metrics (success rate, confidence scores, perceptibility, SSIM,
//! detection preservation, caption drift) are bundled so the whole pipeline
//! runs end-to-end on a laptop.

pub mod attack;
pub mod detector;
pub mod downstream;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod scenedata;
pub mod seed;

pub use error::{Error, Result};
