//! Kolmogorov-Arnold additive models for interpretable tabular classification.

pub mod cli;
pub mod data;
pub mod error;
pub mod interpret;
pub mod kaam;
pub mod kan;
pub mod metrics;
pub mod pipeline;
pub mod service;
pub mod spline;
pub mod split;
pub mod symbolic;
pub mod training;

pub use error::{Error, Result};
