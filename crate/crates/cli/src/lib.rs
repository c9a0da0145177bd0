//! Library side of the `nhim` command: configuration, subcommands and
//! artifact output.

pub mod config;
pub mod run;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver error: {0}")]
    Solve(String),
    #[error("output error: {0}")]
    Io(String),
}

impl CliError {
    /// 64 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 64,
            CliError::Solve(_) | CliError::Io(_) => 1,
        }
    }
}
