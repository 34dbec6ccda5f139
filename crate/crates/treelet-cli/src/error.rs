//! CLI error type: every variant renders as a single line so failures stay
//! machine-parsable on stderr.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{source} ({})", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{message} at line {line}, column {column} of {}", path.display())]
    Cell {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{message} ({})", path.display())]
    Table { path: PathBuf, message: String },

    #[error("invalid JSON in {}: {message}", path.display())]
    Json { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Lib(#[from] treelets::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
