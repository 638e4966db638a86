use alloc::string::String;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("rank deficient data: requested {requested} components but achievable rank is {achievable}")]
    Rank { requested: usize, achievable: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("batch of {0} samples is too small for batch statistics (need at least 2)")]
    BatchSize(usize),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("class {label} has only {count} sample(s) in the batch (need at least 2)")]
    BatchComposition { label: usize, count: usize },

    #[error("regularized within-class scatter is not positive definite (lambda = {0})")]
    Regularization(f64),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("cannot sample batch: {0}")]
    Sampling(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("line search produced no finite candidate")]
    LineSearch,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}
