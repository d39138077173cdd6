//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model construction, training and I/O.
#[derive(Debug)]
pub enum Error {
    /// Two tensors had incompatible shapes for an operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index (token id, table row) fell outside its bound.
    IndexOutOfRange { index: usize, bound: usize },
    /// A sequence exceeded the model's maximum length.
    SequenceTooLong { len: usize, max: usize },
    /// A loss had no contributing positions (everything ignored).
    UndefinedLoss,
    /// Invalid configuration value.
    Config(String),
    /// Operation applied in the wrong state (e.g. double injection).
    State(String),
    /// Caller violated an operation contract.
    Contract(String),
    /// Dataset-level problem (empty split, malformed example).
    Data(String),
    /// Fine-tuning rank too large for the targeted matrix.
    RankTooLarge { r: usize, d_in: usize, d_out: usize },
    /// The requested merge is not defined (adapters have no exact merge).
    UnsupportedMerge(String),
    /// Checkpoint or delta file does not match the expected schema.
    Schema(String),
    /// Config file parse failure with 1-based line number.
    Parse { line: usize, message: String },
    /// Filesystem failure, with the offending path.
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds maximum {max}")
            }
            Error::UndefinedLoss => write!(f, "loss is undefined: every position is ignored"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::RankTooLarge { r, d_in, d_out } => {
                write!(f, "rank {r} must be < min({d_in}, {d_out})")
            }
            Error::UnsupportedMerge(msg) => write!(f, "unsupported merge: {msg}"),
            Error::Schema(msg) => write!(f, "schema error: {msg}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config/usage) rather than
    /// runtime failure; the CLI maps these to exit code 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::RankTooLarge { .. }
                | Error::Contract(_)
        )
    }
}
