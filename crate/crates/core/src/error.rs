use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced or received NaN/Inf values.
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The computation record was already consumed by a reverse pass.
    #[error("computation record already consumed by backward")]
    RecordConsumed,

    /// Malformed on-disk data; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// An iterative solver hit its iteration cap.
    #[error("solver did not converge: {0}")]
    Solver(String),

    /// Invalid model or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A digit image thresholded to zero points.
    #[error("empty cloud: {0}")]
    EmptyCloud(String),

    /// A range crop removed every point.
    #[error("empty crop: {0}")]
    EmptyCrop(String),

    /// The training loop stopped on a non-recoverable condition; the
    /// message names the iteration and batch streams involved.
    #[error("training aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }
}
