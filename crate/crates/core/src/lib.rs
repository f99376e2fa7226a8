//! Sample weighting for pseudo-labeling.
//!
//! Weighting functions for unlabeled-sample losses (truncated Gaussian with
//! EMA-estimated parameters plus fixed, ramp-up, threshold, class-wise
//! threshold and shape-ablation baselines), prediction alignment, exact
//! quantity/quality metrics, a small MLP with manual backprop, a training
//! loop over synthetic 2-D data, and the `pseudolab` command-line driver.

pub mod alignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod prob;
pub mod render;
pub mod ssl;
pub mod weighting;

pub use error::{Error, Result};
pub use prob::ProbVector;
