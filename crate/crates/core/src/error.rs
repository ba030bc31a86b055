//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the numeric layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Cholesky failed even after exhausting the jitter ladder; the kernel
    /// matrix or hyperparameters are ill-conditioned.
    FactorizationFailure { detail: String },
    /// A triangular solve hit a (near-)zero diagonal entry.
    SingularDiagonal { index: usize, value: f64 },
    /// A matrix expected to be symmetric was not, within tolerance.
    NotSymmetric { max_asymmetry: f64 },
    /// An SDE state became non-finite or exceeded the explosion guard.
    NonFiniteState { step: usize, detail: String },
    /// A gradient tensor contained NaN/Inf after the backward pass.
    NonFiniteGradient { param: String },
    /// A non-finite value appeared where a finite one is required.
    NonFiniteValue { context: String },
    /// The requested operation is not differentiable / not supported.
    UnsupportedPrimitive { detail: String },
    /// Invalid configuration or argument.
    InvalidArgument { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::FactorizationFailure { detail } => {
                write!(f, "cholesky factorization failed: {detail}")
            }
            Error::SingularDiagonal { index, value } => {
                write!(f, "singular triangular diagonal at {index}: {value:e}")
            }
            Error::NotSymmetric { max_asymmetry } => {
                write!(f, "matrix not symmetric (max asymmetry {max_asymmetry:e})")
            }
            Error::NonFiniteState { step, detail } => {
                write!(f, "non-finite SDE state at step {step}: {detail}")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter {param}")
            }
            Error::NonFiniteValue { context } => write!(f, "non-finite value in {context}"),
            Error::UnsupportedPrimitive { detail } => write!(f, "unsupported primitive: {detail}"),
            Error::InvalidArgument { detail } => write!(f, "invalid argument: {detail}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
