//! Experiment layer: config parsing, runs, metrics, sweeps and output files.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod sweep;

pub use config::{ExperimentConfig, ModulationKind, Scenario};
pub use experiment::{run_experiment, write_outputs, ExperimentOutput};
pub use metrics::{psnr, selection_stats, MetricsReport, StepSelectionStats};
pub use sweep::{compare, sweep, Axis, FrontierRow};
