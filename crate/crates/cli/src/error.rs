use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use routelens_core::Error as CoreError;

/// Everything that can stop a command, grouped by exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag combination or argument value.
    Usage(String),
    /// An input file or value violates its format or invariants.
    Validation(String),
    /// A model run or analysis step failed on valid input.
    Runtime(String),
    Io {
        path: PathBuf,
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// A core error raised while checking input data.
    pub fn invalid(context: impl fmt::Display, err: CoreError) -> Self {
        CliError::Validation(format!("{context}: {err}"))
    }

    /// A core error raised while computing on already-validated data.
    pub fn runtime(context: impl fmt::Display, err: CoreError) -> Self {
        CliError::Runtime(format!("{context}: {err}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
