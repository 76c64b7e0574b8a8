//! Error type shared by every fallible operation in the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

/// Failure categories surfaced by tensor ops, model assembly and training.
///
/// Every variant carries a human-readable message naming the offending
/// dimensions or values; callers are expected to propagate rather than
/// match on the message text.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are incompatible (mismatched extents, wrong rank,
    /// non-positive output extents, out-of-range indices).
    Shape(String),
    /// A configuration value is invalid or inconsistent (zero stages,
    /// indivisible input extents, bad hyperparameters).
    Config(String),
    /// A runtime contract was violated (non-scalar loss root, non-finite
    /// values where finiteness is required, empty datasets, diverged
    /// training).
    Contract(String),
    /// A serialised artifact (checkpoint, tensor file) is malformed.
    Format(String),
}

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Config(m) => write!(f, "configuration error: {m}"),
            CoreError::Contract(m) => write!(f, "contract violation: {m}"),
            CoreError::Format(m) => write!(f, "format error: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}
