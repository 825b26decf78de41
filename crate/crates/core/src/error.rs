use thiserror::Error;

/// Errors raised by the shaping library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A computation produced NaN or an infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("length mismatch in `{op}`: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The probability-weighted energy of a constellation is zero.
    #[error("degenerate constellation: weighted energy is zero")]
    ZeroEnergy,

    #[error("empty batch")]
    EmptyBatch,

    /// The batch is too short for a fringe-free BPS window.
    #[error("empty valid range: {len} symbols with half window {half_window} (need more than {})", 2 * half_window)]
    EmptyValidRange { len: usize, half_window: usize },

    #[error("support violation: q is zero at index {0} where p is positive")]
    SupportViolation(usize),

    #[error("no probabilistic shaper")]
    NoShaper,

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
