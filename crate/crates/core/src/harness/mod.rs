//! Experiment driver: configuration, checkpoint files, reports and plots.

pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod report;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::ExperimentConfig;
pub use plot::emit_plots;
pub use run::{run_experiment, RunOutcome};
