//! Experiment runner, run comparison and protocol audit behind the `fedhtl`
//! binary.

pub mod audit;
pub mod compare;
pub mod config;
pub mod output;
pub mod run;

use std::fmt;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 1;
    pub const VIOLATION: u8 = 2;
    pub const NUMERIC: u8 = 3;
}

/// A failure mapped to an exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl fmt::Display) -> Self {
        Self {
            code: exit::CONFIG,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(format!("i/o: {e}"))
    }
}
