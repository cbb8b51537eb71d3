//! Command-line driver: experiment configs, artifact persistence, and the
//! report/drift subcommands layered over the core library.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, Result};
