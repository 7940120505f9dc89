// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use crate::axes::AxisBasis;
use crate::steermodel::ModelWeights;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A linear system could not be solved.
    #[error("singular system: {0}")]
    Singular(String),

    /// A statistic is undefined for the data (zero variance, single class, ...).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// FastICA did not converge after all restarts. Carries the best iterate.
    #[error("ICA did not converge after {restarts} restarts (best delta {best_delta:.3e})")]
    IcaNotConverged {
        restarts: usize,
        best_delta: f64,
        best: Box<AxisBasis>,
    },

    /// Training produced a non-finite loss. Carries the last finite weights.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_finite: Box<ModelWeights>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
