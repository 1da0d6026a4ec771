use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("bad magic in {path:?}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path:?} (expected {expected})")]
    Version {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated payload in {path:?}: needed {needed} bytes, have {have}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        have: usize,
    },

    #[error("bag {path:?} declares zero patches")]
    EmptyBag { path: PathBuf },

    #[error("{what}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid bag: {0}")]
    InvalidBag(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split {0:?} is empty")]
    EmptySplit(&'static str),

    #[error("non-finite value in {context} (epoch {epoch}, step {step})")]
    NonFinite {
        context: String,
        epoch: usize,
        step: usize,
    },

    #[error("unknown {0}")]
    UnknownVariant(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/validation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownVariant(_) => 1,
            Error::NonFinite { .. } | Error::NonScalarLoss { .. } | Error::Shape { .. } => 3,
            _ => 2,
        }
    }
}
