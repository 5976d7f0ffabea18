//! Crate-wide error type.

use std::fmt;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, SmolaError>;

/// Errors produced by any public operation in this crate.
#[derive(Debug)]
pub enum SmolaError {
    /// Two matrices (or a matrix and a config) disagree on shape.
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An index addressed a slot that does not exist.
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },
    /// An operation received an empty input it cannot define a result for.
    EmptyInput { context: &'static str },
    /// Jacobi SVD failed to drive the off-diagonal mass below tolerance.
    SvdNonConvergence { off_diagonal: f64 },
    /// Per-token mixture weights did not sum to 1.
    WeightsNotNormalized { token: usize, sum: f64 },
    /// Training loss became non-finite.
    Diverged { step: usize },
    /// A run configuration failed validation.
    InvalidConfig { reason: String },
    /// A checkpoint or report file could not be parsed.
    Corrupt { path: String, reason: String },
    /// Filesystem failure while reading or writing artifacts.
    Io(std::io::Error),
}

impl fmt::Display for SmolaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch {
                context,
                left,
                right,
            } => write!(
                f,
                "{context}: shape mismatch between {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Self::IndexOutOfRange {
                context,
                index,
                len,
            } => write!(f, "{context}: index {index} out of range for length {len}"),
            Self::EmptyInput { context } => write!(f, "{context}: empty input"),
            Self::SvdNonConvergence { off_diagonal } => write!(
                f,
                "svd did not converge; off-diagonal residual {off_diagonal:e}"
            ),
            Self::WeightsNotNormalized { token, sum } => write!(
                f,
                "mixture weights for token {token} sum to {sum} instead of 1"
            ),
            Self::Diverged { step } => write!(f, "training diverged (non-finite loss) at step {step}"),
            Self::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            Self::Corrupt { path, reason } => write!(f, "corrupt file {path}: {reason}"),
            Self::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for SmolaError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for SmolaError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}
