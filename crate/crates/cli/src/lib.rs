//! Command-line interface and HTTP run service for the crimesim simulator.

pub mod commands;
pub mod error;
pub mod heatmap;
pub mod inputs;
pub mod service;

pub use commands::{run, Cli};
pub use error::CliError;
