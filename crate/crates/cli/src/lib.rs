//! Experiment runner for `fedcsr`: TOML configuration, seeded repeats and
//! sweeps, artifact directories, Markdown/CSV/SVG reports and the
//! closed-form oracle suite used as a preflight check.

pub mod config;
pub mod error;
pub mod experiment;
pub mod invariants;
pub mod oracle;
pub mod report;
pub mod svg;

pub use config::{ExperimentConfig, ScenarioSource, SweepConfig, OUTPUT_ROOT_ENV};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, run_sweep, Summary, SweepIndex};
pub use report::emit_report;
