use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit codes: `Config` and `Data` (and I/O)
/// exit with 1, `Usage` with 2.
#[derive(Debug, thiserror::Error)]
pub enum CtsError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CtsError {
    pub fn config(msg: impl Into<String>) -> Self {
        CtsError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CtsError::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CtsError::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CtsError::Io { path: path.into(), source }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CtsError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CtsError> = std::result::Result<T, E>;
