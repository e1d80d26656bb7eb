//! File formats, configuration and subcommands around `multideriv-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
