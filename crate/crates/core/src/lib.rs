//! Desk-scale differentiable 2D Gaussian splatting with a conflict-aware
//! optimization stack.
//!
//! Every training iteration renders the same Gaussian cloud into two views,
//! harmonizes the two gradient fields instead of blindly summing them,
//! down-weights supervision that a consistency predictor flags as unreliable,
//! and feeds per-Gaussian conflict statistics into densification and pruning.
//!
//! Module map:
//! - [`cloud`]: the Gaussian cloud, views, and invariant checks
//! - [`checkpoint`]: versioned, checksummed binary snapshots
//! - [`config`]: training configuration and its key-value file format
//! - [`render`]: differentiable alpha-compositing rasterizer
//! - [`loss`]: masked L1 + DSSIM reconstruction loss with analytic gradients
//! - [`harmonize`]: dual-view gradient conflict resolution
//! - [`mask`]: semantic-consistency masking (feature grid, sigma predictor)
//! - [`structure`]: densification, cloning/splitting, conflict-aware pruning
//! - [`optim`]: Adam-style optimizer with per-attribute learning rates
//! - [`train`]: the training loop tying everything together
//! - [`synth`]: procedural scene and dataset generator with ground truth
//! - [`analysis`]: PSNR/SSIM evaluation, conflict statistics, pair coverage

pub mod analysis;
pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod harmonize;
pub mod img;
pub mod loss;
pub mod mask;
pub mod optim;
pub mod render;
pub mod structure;
pub mod synth;
pub mod train;

mod bytesio;

mod error;
pub use error::{Error, Result};
