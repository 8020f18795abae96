//! Experiment harness for target policy optimization and its baselines.
//!
//! [`trainers`] holds the three policy families (tabular, MNIST MLP,
//! transformer on token tasks), [`experiments`] resolves named presets into
//! runs and writes their outputs, and [`summarize`] aggregates run
//! directories.

pub mod config;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod summarize;
pub mod trainers;

pub use error::{LabError, Result};
