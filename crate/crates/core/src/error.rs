use thiserror::Error;

/// Errors produced by the numerical kernels, model and optimizers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: expected length {expected}, got {got}")]
    Length {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: result needs {requested} elements, budget is {budget}")]
    Size {
        op: &'static str,
        requested: usize,
        budget: usize,
    },

    #[error("{op}: no convergence after {iterations} iterations")]
    NonConvergence { op: &'static str, iterations: usize },

    #[error("{0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("poisoned step: gradient of `{0}` contains NaN")]
    PoisonedStep(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
