//! Desk-scale adversarial training lab.
//!
//! PGD adversarial training on small models, the induced-distribution
//! experiment (retraining from scratch on PGD-perturbed data), Monte-Carlo
//! estimators of the perturbation operator's local dispersion, distance to
//! the clean point and angular spread, and numeric evaluation of the
//! dispersion-based generalisation bound.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod bound;
pub mod data;
pub mod error;
pub mod harness;
pub mod ide;
pub mod metrics;
pub mod models;
pub mod seeds;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
