//! Declarative experiment runner for the `rydcrit` toolkit: configuration,
//! bundled reference setups and the staged pipeline behind the CLI.

pub mod bundled;
pub mod config;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use run::{execute, Command, RunOptions};
