//! Command-line front end: TOML-configured workflows over the library.
//!
//! Three workflows are exposed both as a binary (`taic simulate|evaluate|
//! select <config.toml>`) and as library functions for integration tests:
//! the simulation study grid, candidate-model scoring on a dataset, and
//! model selection.

use thiserror::Error;

pub mod commands;
pub mod config;

/// Anything the CLI can fail with.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] taic::Error),
    #[error(transparent)]
    Data(#[from] taic::data::DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
