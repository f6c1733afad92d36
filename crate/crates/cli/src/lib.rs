//! Library side of the `seco` command-line tool, so that tests can drive
//! the subcommands in-process.

pub mod commands;
pub mod config;

pub use config::{LoadedConfig, RunConfig};
