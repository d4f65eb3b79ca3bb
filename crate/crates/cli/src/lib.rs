//! Batch driver: experiment configs, on-disk formats and the `hibrto`
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
