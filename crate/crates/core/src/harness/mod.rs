//! Experiment harness: configs, sweeps, records, fits and plots.

pub mod cli;
pub mod config;
pub mod fit;
pub mod lemmas;
pub mod plot;
pub mod records;
pub mod sweep;
