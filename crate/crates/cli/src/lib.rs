//! Experiment driver behind the `cbamnet` binary.

pub mod config;
pub mod run;

use std::fmt;

pub use config::{ConfigError, ExperimentConfig, LoadedConfig};

/// Exit status for successful commands.
pub const EXIT_OK: i32 = 0;
/// Exit status for failures while running a valid configuration.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for rejected configurations or arguments.
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Invalid(ConfigError),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(e) => write!(f, "invalid configuration: {e}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e)
    }
}

impl From<cbamnet::Error> for CliError {
    fn from(e: cbamnet::Error) -> Self {
        match e {
            cbamnet::Error::DigestMismatch { .. } => CliError::Invalid(ConfigError::new("checkpoint", e)),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
