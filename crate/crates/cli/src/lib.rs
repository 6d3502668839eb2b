//! Command-line pipeline over a run directory: dataset generation, training,
//! sampling, evaluation and schedule simulation.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod workspace;

pub use cli::run;
pub use config::RunConfig;
pub use error::{CliError, Result};
