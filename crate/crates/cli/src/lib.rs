//! Library behind the `gandl` binary.
//!
//! All command logic lives here, behind plain functions that take parsed
//! arguments and return structured outcomes; the binary only maps flags
//! in and exit codes out. Integration tests call these functions
//! in-process and shell out to the binary only where exit codes and
//! stdio are themselves the contract.

pub mod commands;
pub mod config;
pub mod error;
pub mod tables;

pub use config::{load_config, Overrides, RunConfig};
pub use error::{exit_code, CliError, Result};
