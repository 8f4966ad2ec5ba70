//! Experiment configuration, synthetic data, orchestration and reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;
pub mod synth;
