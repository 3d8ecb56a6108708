use thiserror::Error;

/// Errors raised by the numerical kernels, model code and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("sinkhorn normalization did not reach tolerance after {iterations} iterations (residual {residual:e})")]
    SinkhornNoConvergence { iterations: usize, residual: f64 },

    #[error("row {0} has (near) zero norm")]
    ZeroRow(usize),

    #[error("attention matrix is not symmetric (max asymmetry {0:e})")]
    AsymmetricInput(f64),

    #[error("potential energy forms disagree: quadratic {quadratic}, pairwise {pairwise}")]
    FormMismatch { quadratic: f64, pairwise: f64 },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    VocabOverflow { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("tape node {node} references a later node {input}")]
    GraphCycle { node: usize, input: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
