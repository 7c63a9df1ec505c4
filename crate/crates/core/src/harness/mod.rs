//! Experiment orchestration: configuration, artifacts, commands and the
//! acceptance suite.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod io;
pub mod oracle;

pub use acceptance::{run_acceptance, AcceptOptions, AcceptReport, CriterionResult};
pub use commands::*;
pub use config::ExperimentConfig;
