// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every pipeline stage.

use thiserror::Error;

/// Errors produced by the pruning, evaluation and interpretation stages.
#[derive(Debug, Error)]
pub enum PieError {
    /// A model, synergy or sweep configuration violates its invariants.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor, sequence or trace dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A metric or operation was called without a required argument.
    #[error("argument error: {0}")]
    Argument(String),

    /// Task generation could not satisfy the template constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A dataset, circuit or model file record is malformed.
    #[error("parse error at {location}: field `{field}`: {message}")]
    Parse {
        /// Record id when known, otherwise `line N`.
        location: String,
        field: String,
        message: String,
    },

    /// The core/boundary split is impossible for the given scores and budget.
    #[error("partition error: {0}")]
    Partition(String),

    /// `|L(M) - L(empty)|` is below the degeneracy floor.
    #[error("degenerate pair `{0}`: clean and corrupted metrics coincide")]
    DegeneratePair(String),

    /// An explainer or auditor client failed after all retries.
    #[error("client error: {0}")]
    Client(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PieError>;

impl PieError {
    pub(crate) fn parse(
        location: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Self::Parse {
            location: location.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}
