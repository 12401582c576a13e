use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("matrix is indefinite: eigenvalue {eigenvalue:e} below -{tol:e} * lambda_max")]
    Indefinite { eigenvalue: f64, tol: f64 },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("infeasible mask: column {0} has no support")]
    InfeasibleMask(usize),

    #[error("infeasible shapes: rank r_i = {r_i} < rank r_j = {r_j}")]
    InfeasibleShapes { r_i: usize, r_j: usize },

    #[error("orientation error: low-level dimension {low} < high-level dimension {high}")]
    Orientation { low: usize, high: usize },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("topology does not support global sections: {0}")]
    UnsupportedTopology(String),

    #[error("inconsistent path composites at node {node}: deviation {deviation:e}")]
    InconsistentPaths { node: usize, deviation: f64 },

    #[error("cycle detected involving node {0}")]
    Cycle(usize),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CanError>;

impl From<std::io::Error> for CanError {
    fn from(e: std::io::Error) -> Self {
        CanError::Io(e.to_string())
    }
}
