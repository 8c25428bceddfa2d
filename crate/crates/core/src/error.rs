use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum DafcError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("kernel {kernel:?} larger than padded input {input:?} in {op}")]
    WindowTooLarge {
        op: &'static str,
        kernel: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("row {0} of the label matrix is all zeros")]
    ZeroRow(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("label error: {0}")]
    Labels(String),
    #[error("malformed IDX file: {0}")]
    Idx(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted at epoch {epoch}, batch {batch}: non-finite {term}")]
    TrainingDiverged {
        epoch: usize,
        batch: usize,
        term: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DafcError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> DafcError {
    DafcError::InvalidArgument(msg.into())
}
