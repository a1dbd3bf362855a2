use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time step {dt} does not divide the horizon {horizon}")]
    StepDoesNotDivide { dt: f64, horizon: f64 },

    #[error("non-finite particle state in replica {replica} at step {step}")]
    NonFinite { replica: u32, step: usize },

    #[error("polynomial degree {degree} exceeds the configured maximum {max}")]
    DegreeOverflow { degree: u32, max: u32 },

    #[error("partition function {index} has mass {mass:e}, below 1e-12")]
    DegenerateMass { index: usize, mass: f64 },

    #[error("Jacobian determinant {det} is not positive (replica {replica}, step {step})")]
    Orientation { replica: u32, step: usize, det: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
