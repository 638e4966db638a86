//! File formats and the command-line driver around `fisherlda-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod descfile;
pub mod error;
pub mod manifest;
pub mod runlog;

pub use error::{CliError, Result};
