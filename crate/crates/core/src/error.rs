use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("dataset layout error at {path}: {msg}")]
    Layout { path: PathBuf, msg: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
