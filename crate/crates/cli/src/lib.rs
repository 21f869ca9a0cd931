//! Command implementations behind the `advsr` binary: data generation,
//! training phases, evaluation, the loss-ratio sweep and report rendering.

pub mod commands;
pub mod config;
pub mod layout;
pub mod manifest;

pub use commands::Experiment;
pub use config::ExperimentConfig;
pub use layout::{Phase, RunLayout};
