use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention window has no valid entries (group {group})")]
    EmptyWindow { group: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("extent {extent} is not divisible by {divisor}; resize the input to a multiple of {divisor} (e.g. {suggestion})")]
    Indivisible {
        extent: usize,
        divisor: usize,
        suggestion: usize,
    },

    #[error("full affinity for {cells} cells needs {elements} elements (~{bytes} bytes), above the guard of {limit} cells")]
    AffinityTooLarge {
        cells: usize,
        elements: u64,
        bytes: u64,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("palette fitting needs at least {needed} distinct colours, found {found}")]
    TooFewColours { needed: usize, found: usize },

    #[error("non-finite loss at step {step} (lr {lr:e}, ground-truth probability {p:.4})")]
    NonFiniteLoss { step: usize, lr: f64, p: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("extent mismatch: {what} is {found_h}x{found_w}, expected {want_h}x{want_w}")]
    ExtentMismatch {
        what: String,
        want_h: usize,
        want_w: usize,
        found_h: usize,
        found_w: usize,
    },

    #[error("checkpoint: bad magic {0:?}, expected \"CFLW\"")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("checkpoint: file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Corrupt { stored: u32, computed: u32 },

    #[error("checkpoint: {0}")]
    CheckpointLayout(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
