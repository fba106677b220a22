//! Training, evaluation and reporting around the `kpose` pipeline.
//!
//! - [`config`]: training configuration and the learning-rate schedule.
//! - [`adam`]: bias-corrected Adam.
//! - [`checkpoint`]: the `SACP` checkpoint container.
//! - [`train`]: mini-batch training with JSON-lines logs.
//! - [`eval`]: model, oracle and baseline evaluation reports.
//! - [`macs`]: analytic multiply-accumulate counts.
//! - [`visualize`]: heatmap, reconstruction and pose-arrow pixmaps.
//! - [`ablation`]: the variant suite and its CSV table.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod macs;
pub mod train;
pub mod visualize;

pub use error::{HarnessError, Result};
