//! Experiment runner and plotter for the natural-gradient library.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod plot;

pub use config::{ExperimentConfig, ExperimentId};
pub use error::{CliError, CliResult};
pub use experiments::{run_experiment, run_from_path, RunReport};
pub use plot::emit_plots;
