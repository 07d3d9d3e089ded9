//! Error types shared across the crate.

use thiserror::Error;

/// A trajectory left the configured bound; almost always a sign of a bug or
/// an unstable step size, never of legitimate dynamics at desk scale.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("trajectory diverged at t={time} (step {step}, |x|={norm:.3e} > {bound:.3e})")]
pub struct Divergence {
    pub step: u64,
    pub time: f64,
    pub norm: f64,
    pub bound: f64,
    /// Index of the ensemble member, when evolving an ensemble.
    pub point: Option<usize>,
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Divergence(#[from] Divergence),

    #[error("driving path covers [{cover_lo}, {cover_hi}] but [{want_lo}, {want_hi}] was requested")]
    Coverage {
        cover_lo: f64,
        cover_hi: f64,
        want_lo: f64,
        want_hi: f64,
    },

    #[error("{0} is not a multiple of the grid step {1}")]
    OffGrid(f64, f64),

    #[error("exact assignment needs equally many equally weighted samples on both sides (got {0} and {1}); resample first")]
    SizeMismatch(usize, usize),

    #[error("need at least {need} checkpoints with nonzero fraction, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("small-set search exceeded the cap of {0} blocks")]
    SearchCapExceeded(usize),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
}

impl CoreError {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
