//! Error type shared by every module.

use thiserror::Error;

/// Failures raised by the numerical kernels and the scenario runner.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum HilbexError {
    /// Invalid configuration or argument; maps to CLI exit code 2.
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },
    /// A documented precondition of an operation does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Two slices or a slice and a grid do not belong together.
    #[error("grid mismatch: slice built on grid {found}, expected {expected}")]
    GridMismatch { expected: u64, found: u64 },
    /// An iterative solver did not reach its tolerance.
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    /// The solution left the smooth regime or became unphysical.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// The fluid gradient exceeded the blow-up ceiling before the horizon.
    #[error("gradient blow-up at t={time}: max |d(rho,u,T)/dx3| = {gradient:e}")]
    BlowUp { time: f64, gradient: f64 },
    /// Half-space solvability conditions are violated.
    #[error("solvability violated: micro defect {micro_defect:e}, wall moments {moments:?}")]
    Solvability {
        micro_defect: f64,
        moments: [f64; 4],
    },
    /// Filesystem or serialization failure in the runner.
    #[error("io error: {0}")]
    Io(String),
}

impl HilbexError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        HilbexError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Qualifies a config field with the section it came from.
    pub fn within(self, section: &str) -> Self {
        match self {
            HilbexError::Config { field, reason } => {
                HilbexError::config(format!("{section}.{field}"), reason)
            }
            other => HilbexError::config(section, other.to_string()),
        }
    }

    /// True for errors that stem from user input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, HilbexError::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, HilbexError>;
