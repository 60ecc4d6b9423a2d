//! Experiment runner for time-to-first-spike networks: data, configuration,
//! checkpoints, training loops and metrics.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod runner;
pub mod train;
