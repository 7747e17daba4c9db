use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("backward already called on this tape; rebuild the tape before calling again")]
    TapeConsumed,
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error in {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
