use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate input: row `{id}` has norm {norm:e}")]
    DegenerateInput { id: String, norm: f64 },

    #[error("degenerate span: text embeddings have numerical rank {rank}, need at least {required}")]
    DegenerateSpan { rank: usize, required: usize },

    #[error("degenerate projection: row `{id}` lies outside the basis span (projected norm {norm:e})")]
    DegenerateProjection { id: String, norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error(
        "conjugate gradient did not converge in {iterations} iterations (worst relative residual {worst_residual:e})"
    )]
    Solver { iterations: usize, worst_residual: f64 },
}

impl Error {
    /// Stable machine-readable code used in structured error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Validation(_) => "validation",
            Error::DegenerateInput { .. } => "degenerate_input",
            Error::DegenerateSpan { .. } => "degenerate_span",
            Error::DegenerateProjection { .. } => "degenerate_projection",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Solver { .. } => "solver",
        }
    }

    /// Whether the error stems from bad input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_) | Error::Validation(_) | Error::DimensionMismatch { .. })
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
