//! Multi-task attention network that predicts the mean and the standard
//! deviation of aesthetic opinion scores, trained with a gated
//! confidence-interval ranking loss.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense `f64` tensors with reverse-mode differentiation.
//! - [`stats`]: confidence intervals and evaluation metrics.
//! - [`model`]: LMLSP blocks, attention masks and the two-task head.
//! - [`losses`]: σ MAE, CI ranking loss, μ and multi-task objectives.
//! - [`data`]: `FTNS` tensor files, label tables, synthetic data, splits.
//! - [`trainer`]: ADAM, learning-rate schedule, training and evaluation.
//! - [`config`]: key=value run configuration and manifests.
//! - [`gradcheck`]: finite-difference check of the full model.

// `!(x >= 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod trainer;
