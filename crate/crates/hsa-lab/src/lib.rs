//! Desk-scale lab for hierarchical sparse attention (HSA) inside a hybrid
//! sliding-window + retrieval decoder.
//!
//! The crate is organized as:
//! - [`numerics`]: tape-based reverse-mode autodiff with checked backward passes
//! - [`attention`]: sliding-window attention (RoPE) and chunk-retrieval HSA (NoPE)
//! - [`model`]: the hybrid decoder with a shared mid-layer chunk memory
//! - [`datagen`]: deterministic synthetic task generators (NIAH, variable
//!   tracking, self-copy, probe injection)
//! - [`trainer`]: phased curriculum training with AdamW and checkpoint/resume
//! - [`evalharness`]: length-generalization grids, perplexity, analytic cost model

pub mod attention;
pub mod datagen;
pub mod error;
pub mod evalharness;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{HsaError, Result};

/// Crate version recorded in run manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
