use std::path::PathBuf;

use crate::dynamics::Trajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("matrix is singular: smallest eigenvalue {min_eigenvalue:e} is below tolerance {tolerance:e}")]
    SingularMatrix { min_eigenvalue: f64, tolerance: f64 },

    #[error("damping required: {0}")]
    DampingRequired(String),

    #[error("layer coupling matrix for depth {depth} is singular")]
    SingularSigma { depth: usize },

    #[error("non-finite pre-activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("quadrature orders disagree by {difference:e}")]
    QuadratureNotConverged { difference: f64 },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("training diverged at step {step}")]
    Diverged { step: usize, trajectory: Box<Trajectory> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: file truncated")]
    TruncatedFile { path: PathBuf },

    #[error("class {0} not present in the label file")]
    ClassNotFound(u8),

    #[error("label arity mismatch: {0}")]
    ArityMismatch(String),

    #[error("linear algebra backend: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}

impl Error {
    /// True for failures that stem from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularMatrix { .. }
                | Error::DampingRequired(_)
                | Error::SingularSigma { .. }
                | Error::NonFiniteActivation { .. }
                | Error::QuadratureNotConverged { .. }
                | Error::NotConverged { .. }
                | Error::Diverged { .. }
                | Error::Linalg(_)
        )
    }
}
