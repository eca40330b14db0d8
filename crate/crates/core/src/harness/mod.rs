//! Experiment orchestration, sweeps, views and on-disk formats.

pub mod config;
pub mod experiment;
pub mod hoff;
pub mod sweep;
pub mod views;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, Outcome, Session};
pub use sweep::{run_ablation, run_longtail, SweepTable};
