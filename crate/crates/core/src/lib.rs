//! Desk-scale laboratory for asynchronous, importance-weighted policy
//! gradients.

pub mod baselines;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod weighting;

pub use error::{Error, Result};
