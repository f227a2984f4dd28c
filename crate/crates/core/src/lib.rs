//! Gas-concentration regression for electronic-nose sensor arrays.
//!
//! The model combines a dual-stream convolutional front end (shared-kernel
//! and position-specific convolutions), a feature reactivation block
//! (conv → batch-norm → conv → batch-norm with a residual), and a hybrid
//! attention block (multi-head self-attention in parallel with a
//! position-specific convolution), followed by a small dense decoder.
//!
//! Modules, bottom-up:
//! - [`numcore`]: tensors, reverse-mode autodiff, seeded RNG, parallel helpers
//! - [`layers`]: convolutions, pooling, batch-norm, dropout, attention, dense
//! - [`model`]: architecture assembly, configuration, checkpoints
//! - [`data`]: dataset parsing, standardization, windowing, splits, archives
//! - [`trainer`]: loss, metrics, Adam, training loop, benchmarking, baselines

pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
