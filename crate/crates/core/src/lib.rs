//! Surrogate-assisted, data-shielding federated estimation of sparse logistic
//! risk models.
//!
//! Sites fit a single-index model of a cheap surrogate on their unlabeled
//! data, share only low-dimensional summaries, and a coordinator combines
//! them with a small labeled set to recover the logistic coefficients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod kernel;
pub mod metrics;
pub mod simfit;
pub mod simgen;
pub mod solvers;
mod simd;

pub use data::{CoefficientVector, Dataset, FitResult};
pub use error::{Result, SashError};
