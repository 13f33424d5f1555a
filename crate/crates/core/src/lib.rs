//! Geometry, objectives and diagnostics for consistency-regularized prompt
//! tuning of two-tower models on the unit sphere.
//!
//! - [`sphere`]: normalization, cosine geometry, residual fusion.
//! - [`losses`]: cross-entropy and cosine-consistency objectives with gradients.
//! - [`drift`]: PCA subspace fitting and the off-manifold drift metric.
//! - [`bounds`]: closed-form generalization and perturbation bounds.
//! - [`task`] / [`trainer`]: a synthetic shortcut task and a full-batch trainer.
//! - [`io`], [`config`], [`verify`]: file formats, run configuration and the
//!   randomized property suite behind the CLI.

pub mod bounds;
pub mod config;
pub mod drift;
pub mod error;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod prompt;
pub mod sphere;
pub mod task;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::FeatureMatrix;
pub use sphere::UnitVector;
