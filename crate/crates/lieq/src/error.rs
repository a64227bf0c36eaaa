use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lieq_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("payload checksum mismatch: header says {expected:#010x}, payload hashes to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("unsupported report format {0:?}")]
    UnsupportedFormat(String),
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("{what} was made for model {expected:#010x} but this model is {actual:#010x}")]
    ModelMismatch { what: &'static str, expected: u32, actual: u32 },
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, message: impl ToString) -> Self {
        Error::Config { field: field.into(), message: message.to_string() }
    }

    /// 0 success, 1 internal, 2 invalid input, 3 degenerate data.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Core(lieq_core::Error::DegenerateMetric(_)) => 3,
            Error::Internal(_) => 1,
            _ => 2,
        }
    }
}
