use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} must be strictly positive, found {value} at index {index}")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("exponent {value} exceeds the overflow guard at index {index}")]
    ExpOverflow { index: usize, value: f64 },

    #[error("game failed validation: {0}")]
    Validation(String),

    #[error("forward solve did not converge after {iterations} iterations (best residual norm {best_residual:e})")]
    NotConverged {
        iterations: usize,
        best_residual: f64,
    },

    #[error("inverse solve aborted at iteration {iteration}: {source}")]
    InverseAborted {
        iteration: usize,
        history: Vec<crate::inverse::HistoryEntry>,
        #[source]
        source: Box<Error>,
    },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("row {row} of {what} is not a probability distribution (sum {sum})")]
    NotDistribution {
        what: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("invalid constraint set: {0}")]
    InvalidSet(String),

    #[error("invalid trajectory data: {0}")]
    Trajectory(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
