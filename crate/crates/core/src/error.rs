use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside of its contract.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("linear algebra error: {0}")]
    LinAlg(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::LinAlg(_) => "linalg",
            Error::Training(_) => "training",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

/// Problems with on-disk dataset and checkpoint files.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("not a {expected} file (magic bytes {found:?})")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found}; this build reads version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("malformed header: {0}")]
    Header(String),
}
