//! Command-line runner for the correlated detector chain simulator: run
//! configuration, experiment drivers, output files and the acceptance suite.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod verify;

pub use config::RunConfig;
pub use error::{CliError, Result};
