use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("curvilinear singularity: |1 - curvature*y| = {0:e}")]
    Singularity(f64),
    #[error("implicit integrator did not converge (residual {residual:e} after {iterations} iterations)")]
    NonConvergence { residual: f64, iterations: usize },
    #[error("abscissa s = {s} outside road map range [0, {length}]")]
    OutOfRange { s: f64, length: f64 },
    #[error("projection onto centreline failed: {0}")]
    Projection(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("riccati iteration did not converge: {0}")]
    Riccati(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("feedback phase failed: {0}")]
    Feedback(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
