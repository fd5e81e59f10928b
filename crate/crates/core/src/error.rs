//! Error type shared by all core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors surfaced by the core math, model and data routines.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes incompatible for an operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation produced a NaN or infinity.
    NonFinite { op: &'static str },
    /// Unguarded division hit a near-zero denominator.
    DivisionByZero { op: &'static str },
    /// A precondition on an argument failed.
    InvalidArgument { op: &'static str, msg: String },
    /// atan2 received (0, 0); the phase angle is undefined there.
    AtanOrigin { channel: usize },
    /// A gradient contained NaN when the optimizer consumed it.
    NanGradient { param: String },
    /// Checkpoint payload malformed.
    Checkpoint(CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    Truncated,
    Malformed(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            CoreError::NonFinite { op } => write!(f, "{op}: produced non-finite values"),
            CoreError::DivisionByZero { op } => {
                write!(f, "{op}: denominator magnitude below 1e-12")
            }
            CoreError::InvalidArgument { op, msg } => write!(f, "{op}: {msg}"),
            CoreError::AtanOrigin { channel } => {
                write!(f, "atan2 undefined at (0, 0) for channel {channel}")
            }
            CoreError::NanGradient { param } => write!(f, "NaN gradient in parameter '{param}'"),
            CoreError::Checkpoint(e) => write!(f, "checkpoint: {e}"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic"),
            CheckpointError::VersionMismatch { found, expected } => {
                write!(f, "version {found}, expected {expected}")
            }
            CheckpointError::Truncated => write!(f, "truncated file"),
            CheckpointError::Malformed(msg) => write!(f, "malformed: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}
impl core::error::Error for CheckpointError {}

impl From<CheckpointError> for CoreError {
    fn from(e: CheckpointError) -> Self {
        CoreError::Checkpoint(e)
    }
}

pub type Result<T> = core::result::Result<T, CoreError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::InvalidArgument { op, msg: msg.into() }
}
