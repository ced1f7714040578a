//! Post-ranking familiarity debiasing.

pub mod baselines;
pub mod bucketizer;
pub mod data;
pub mod debias;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod policies;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
