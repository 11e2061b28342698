use thiserror::Error;

/// Errors raised anywhere in the estimator pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced NaN or an infinity.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// The differentiation tape was used incorrectly.
    #[error("tape usage: {0}")]
    Usage(String),

    /// Invalid graph input.
    #[error("graph: {0}")]
    Graph(String),

    /// A malformed row in an input file.
    #[error("{path}:{line}: {msg}")]
    Ingest {
        path: String,
        line: usize,
        msg: String,
    },

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    /// Numerical failure outside the tape (transport solver, statistics).
    #[error("numeric: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error(
        "training diverged at iteration {iteration} (last finite loss {last_good_loss:?} at iteration {last_good_iteration:?})"
    )]
    Diverged {
        iteration: usize,
        last_good_iteration: Option<usize>,
        last_good_loss: Option<f64>,
    },

    /// Malformed or incompatible checkpoint.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
