use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MooseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MooseError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("softmax row {row} has no allowed entries")]
    FullyMaskedRow { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no recorded forward pass: {0}")]
    NoTrace(String),

    #[error("line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("bad magic {found:?}, expected \"MTSR\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated tensor file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor dims {0:?} overflow the addressable size")]
    DimOverflow(Vec<u64>),

    #[error("malformed image file {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MooseError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        MooseError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MooseError::InvalidArgument(msg.into())
    }
}
