//! Uniform-masking MAE laboratory.
//!
//! A small, CPU-only masked-image-modeling toolkit built around uniform
//! sampling (exactly one visible patch per 2×2 cell) and secondary masking.
//! It pairs miniature pyramid encoders (spatial-reduction and shifted-window
//! attention) with a lightweight MAE decoder, and ships the harness that
//! certifies compact-input forwarding against full-size forwarding with
//! placeholders.
//!
//! Module map:
//!
//! - [`numerics`]: dense tensors, a recording tape with per-op backward rules,
//!   finite-difference checking and the binary tensor blob format.
//! - [`masking`]: RS/GS/US/UM mask plans and the compact index maps.
//! - [`patchio`]: images, patch tokens, compact composition, normalized targets, PPM/PGM.
//! - [`encoders`]: MiniPVT and MiniSwin with compact and full-masked forward paths.
//! - [`decoder`]: token assembly, plain transformer decoding and the masked loss.
//! - [`pipelines`]: UM-MAE and SimMIM-style models, AdamW, schedules, training, checkpoints.
//! - [`evaluation`]: equivalence certification, mask statistics, FLOP accounting, benchmarks.

pub mod decoder;
pub mod encoders;
mod error;
pub mod evaluation;
pub mod masking;
pub mod nn;
pub mod numerics;
pub mod patchio;
pub mod pipelines;
pub mod rng;

pub use error::{Error, Result};
