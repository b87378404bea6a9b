use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNotConverged { sweeps: usize, residual: f64 },
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("batch activation matrix is rank deficient: rank {rank} < {needed} columns")]
    RankDeficient { rank: usize, needed: usize },
    #[error("trace was captured at parameter version {trace}, model is at {model}")]
    StaleTrace { trace: u64, model: u64 },
    #[error("trace holds no captured input for {0}")]
    MissingCapture(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("finite-difference step underflowed (epsilon = {0:e})")]
    StepUnderflow(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        op,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}
