//! Command implementations behind the `cvee` binary.

pub mod commands;
pub mod config;

use thiserror::Error;

pub use config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("computation: {0}")]
    Computation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Computation(_) => 2,
        }
    }
}

impl From<cvee::Error> for CliError {
    fn from(e: cvee::Error) -> Self {
        use cvee::Error::*;
        match e {
            Dimension(_) | InvalidArgument(_) | KeyMismatch(_) | Parse { .. } | Csv(_) | CutoffTooSmall { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Computation(e.to_string()),
        }
    }
}

/// Outcome of a command that finished and wrote its outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Success,
    /// Some solves ended without an optimal status; outputs were still written.
    NonOptimal,
}

impl Completion {
    pub fn exit_code(self) -> i32 {
        match self {
            Completion::Success => 0,
            Completion::NonOptimal => 3,
        }
    }
}
