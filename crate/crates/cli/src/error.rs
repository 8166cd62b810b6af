//! Process-level error classification. Exit codes: 0 success, 1 usage error,
//! 2 data/config contract violation, 3 numerical failure.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Contract(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Contract(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Contract(msg) => write!(f, "{msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Contract(format!("io error: {e}"))
    }
}

impl From<mmer_core::TensorError> for CliError {
    fn from(e: mmer_core::TensorError) -> Self {
        CliError::Contract(format!("{e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Contract(format!("manifest json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn contract(msg: impl Into<String>) -> CliError {
    CliError::Contract(msg.into())
}
