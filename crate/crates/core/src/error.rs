use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("evaluation classes overlap the training classes: {0:?}")]
    ClassOverlap(Vec<String>),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch {
            context,
            expected,
            actual,
        })
    }
}
