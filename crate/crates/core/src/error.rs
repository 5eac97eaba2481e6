use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("conjugate gradients did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("line search stalled after {backoffs} backoffs (last step {last_step:e})")]
    LineSearchStall { backoffs: usize, last_step: f64 },

    #[error("direction is not a descent direction (directional derivative {0:e})")]
    NotDescent(f64),

    #[error("kernel system is singular; use kernel_epsilon > 0")]
    SingularKernel,

    #[error("no invertible {d}-column block found (best condition number {condition:e})")]
    Degeneracy { d: usize, condition: f64 },

    #[error("domain error: {0}")]
    Domain(String),
}

pub(crate) fn shape_err(expected: impl Into<String>, actual: impl Into<String>) -> Error {
    Error::Shape {
        expected: expected.into(),
        actual: actual.into(),
    }
}
