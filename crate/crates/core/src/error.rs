use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}; state dumped to {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("prefix has not been scored in this session")]
    PrefixCacheMiss,

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
