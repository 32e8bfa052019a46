//! Configuration, artifact output and subcommands for the `jepo` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
