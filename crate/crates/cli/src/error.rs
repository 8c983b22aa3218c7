use std::path::Path;

use thiserror::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Validation(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::NonFinite(_) => 4,
            CliError::CheckFailed(_) => 5,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingInput(path.display().to_string())
        } else {
            CliError::Runtime(format!("{}: {e}", path.display()))
        }
    }

    /// Attaches `path` to file errors from the core library.
    pub fn at(path: &Path) -> impl Fn(agt_core::Error) -> Self + '_ {
        move |e| match e {
            agt_core::Error::Io(io) => CliError::io(path, io),
            other => CliError::Runtime(format!("{}: {other}", path.display())),
        }
    }
}

impl From<agt_core::Error> for CliError {
    fn from(e: agt_core::Error) -> Self {
        match e {
            agt_core::Error::Numeric(msg) => CliError::NonFinite(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}
