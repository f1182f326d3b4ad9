use thiserror::Error;

use crate::field::ScalarField;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported dimension {0}, expected 2 or 3")]
    UnsupportedDimension(usize),

    #[error("node index {index} out of range for grid with {len} nodes")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("point outside the closed half space: {0}")]
    Domain(String),

    #[error("singular point: {0}")]
    Singularity(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("node {0} has no complete second-difference stencil")]
    Stencil(usize),

    #[error("ellipticity violated: {0}")]
    Ellipticity(String),

    #[error("coefficient matrix at node {node} is not admissible: {detail}")]
    Coefficient { node: usize, detail: String },

    #[error("Newton iteration stalled after {iterations} iterations at residual {residual:.3e}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        iterate: Box<ScalarField>,
    },

    #[error("linear solver stopped after {iterations} iterations with relative residual {achieved:.3e}")]
    LinearSolver { iterations: usize, achieved: f64 },

    #[error("degenerate annulus: {0}")]
    DegenerateAnnulus(String),

    #[error("degenerate section: {0}")]
    DegenerateSection(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("level error: {0}")]
    Level(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than a failed computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnsupportedDimension(_)
                | Error::Argument(_)
                | Error::Validation(_)
                | Error::Json(_)
        )
    }
}
