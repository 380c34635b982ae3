//! Error type shared by all core modules.

use alloc::string::String;

/// Errors produced by core operations.
///
/// `Invalid` covers precondition violations (bad shapes, empty inputs,
/// out-of-range parameters); `Numeric` covers conditions detected mid-run
/// (non-finite values, divergence).
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A precondition on the inputs was violated.
    Invalid(String),
    /// A numeric failure was detected while running.
    Numeric(String),
}

impl core::fmt::Display for CoreError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CoreError::Invalid(msg) => write!(f, "invalid input: {msg}"),
            CoreError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> CoreError {
    CoreError::Numeric(msg.into())
}
