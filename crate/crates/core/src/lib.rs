//! Adversarial training with knowledge distillation of teacher outputs and
//! teacher internal representations, plus the standard adversarial
//! training and output-only distillation baselines.
//!
//! Module map:
//! - [`model`]: differentiable classifiers exposing activation taps
//! - [`optim`]: momentum SGD and the milestone learning-rate schedule
//! - [`attacks`]: FGSM, PGD and multi-restart PGD under an l-infinity budget
//! - [`distill`]: temperature softmax, KL, feature-stack distance, losses
//! - [`train`]: SAT / ARD / ARDIR training loops and teacher combinations
//! - [`eval`]: robustness evaluation, generalization gaps, result tables
//! - [`harness`]: configuration, datasets, manifests, sweeps and plots

pub mod attacks;
pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod optim;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
