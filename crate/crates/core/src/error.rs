use std::fmt;

use crate::trace::LossTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown interference class `{0}`")]
    UnknownClass(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {found}")]
    Dims { what: &'static str, expected: String, found: String },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{field} out of range: {msg}")]
    Range { field: &'static str, msg: String },
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: String, trace: Box<LossTrace> },
    #[error("no samples at {factor} = {value} for class {class}")]
    MissingEndpoint { class: String, factor: &'static str, value: f64 },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dims(what: &'static str, expected: impl fmt::Debug, found: impl fmt::Debug) -> Self {
        Error::Dims { what, expected: format!("{expected:?}"), found: format!("{found:?}") }
    }
}

/// Rejection of a malformed binary frame, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad frame field `{field}` at byte {offset}: {msg}")]
pub struct FrameError {
    pub field: &'static str,
    pub offset: usize,
    pub msg: String,
}

impl FrameError {
    pub(crate) fn new(field: &'static str, offset: usize, msg: impl Into<String>) -> Self {
        FrameError { field, offset, msg: msg.into() }
    }
}
