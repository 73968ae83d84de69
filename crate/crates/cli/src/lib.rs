//! Library side of the `mdgmm` command-line tool: config parsing, CSV
//! ingestion, subcommand drivers and report rendering.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod ingest;
pub mod report;

pub use commands::{cmd_diagnose, cmd_estimate, cmd_simulate};
pub use config::RunConfig;
pub use error::{CliError, Result};
pub use report::Report;
