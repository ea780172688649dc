//! Library side of the `codicast` binary: configuration, the subcommand
//! bodies and greyscale field dumps.

pub mod commands;
pub mod config;
pub mod error;
pub mod pgm;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
