use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for each failure class.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    /// An invariant inside the library was violated; not a user error.
    pub const INTERNAL: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config keys or values, unknown names.
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed dataset files or inconsistent inputs.
    #[error("data: {0}")]
    Data(String),
    /// Bad checkpoint magic or version.
    #[error("checkpoint format: {0}")]
    Format(String),
    /// Checkpoint truncated or its manifest and payload disagree.
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Core(#[from] kbgsat_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use kbgsat_core::Error as E;
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } | CliError::Data(_) | CliError::Format(_) | CliError::Corrupt(_) => exit::DATA,
            CliError::Core(e) => match e {
                E::Config(_) => exit::USAGE,
                E::Parse { .. } | E::Duplicate { .. } | E::Shape { .. } => exit::DATA,
                E::NonFiniteGradient(_) | E::NonFiniteLoss { .. } => exit::NUMERIC,
                E::Contract(_) => exit::INTERNAL,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
