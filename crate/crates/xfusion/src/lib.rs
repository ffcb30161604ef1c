//! Desk-scale multi-modal anomaly synthesis.
//!
//! The crate generates a procedural captioned-defect corpus, fuses caption /
//! mask / texture conditioning into a single token matrix, trains a small
//! conditioned denoising-diffusion model that paints defects strictly inside
//! a mask, and evaluates the result (sharpness, diversity, mask fidelity and
//! a downstream segmentation/classification study).
//!
//! Pipeline stages are exposed both as library modules and through the
//! `xfusion` CLI (`gen-corpus`, `train`, `sample`, `eval`). Everything is
//! seeded: identical configs and seeds reproduce identical artifacts, byte
//! for byte.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
