use thiserror::Error;

/// Errors raised by the attention engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value at ({row}, {col}) in {op}")]
    NonFinite {
        op: &'static str,
        row: usize,
        col: usize,
    },

    /// Every key of a query row is masked, or its kernel row sum is not positive.
    #[error("degenerate query row {row}: {reason}")]
    DegenerateRow { row: usize, reason: String },

    #[error("SVD did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    Convergence { sweeps: usize, residual: f64 },

    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },

    #[error("token index {index} out of range for vocabulary of size {size}")]
    Lookup { index: usize, size: usize },

    #[error("causal mask misaligned: offset {offset} + {n_q} queries exceeds {n_kv} keys")]
    MaskAlignment {
        offset: usize,
        n_q: usize,
        n_kv: usize,
    },

    #[error("invalid attention spec: {0}")]
    Spec(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("cannot access {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    op: &'static str,
    left: impl Into<String>,
    right: impl Into<String>,
) -> Error {
    Error::Shape {
        op,
        left: left.into(),
        right: right.into(),
    }
}
