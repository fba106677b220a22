//! Relative rotation estimation from structure-aware keypoints.
//!
//! - [`so3`]: rotations, 6D representation, sampling and metrics.
//! - [`procrustes`]: weighted rotation-only Procrustes with an analytic backward.
//! - [`nn`]: parameter store and attention, positional, convolutional and MLP layers.
//! - [`model`]: the keypoint, correspondence and pose pipeline with its losses.
//! - [`synthdata`]: procedural point-cloud objects, an orthographic splat renderer and datasets.

pub mod error;
pub mod model;
pub mod nn;
pub mod procrustes;
pub mod so3;
pub mod synthdata;

pub use error::{CoreError, Result};
