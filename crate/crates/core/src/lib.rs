//! Exact oracles, marginal predictors and samplers for Gaussian-embedded discrete sequences.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discrete;
pub mod model;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod stats;

pub use error::{Error, Result};
