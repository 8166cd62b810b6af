//! IO companion to `mmer-core`: the dataset container format, a seeded
//! synthetic generator, text configuration files, checkpoint files, CSV
//! diagnostics exports, and the `mmer` command-line interface.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod exports;
pub mod manifest;
pub mod records;
pub mod synth;

pub use error::{CliError, Result};
