// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::attn::HeadId;

/// Errors raised by model construction, analysis, rectification and theory routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A score row handed to the softmax contains NaN or infinity.
    #[error("non-finite score in row {row}")]
    NonFiniteScores { row: usize },

    /// The forward pass produced NaN or infinite activations.
    #[error("non-finite activations in layer {layer}")]
    NonFiniteActivations { layer: usize },

    /// A (layer, head) pair outside the model.
    #[error("head {head} is out of range for a model with {layers} layers and {heads} heads")]
    InvalidHead {
        head: HeadId,
        layers: usize,
        heads: usize,
    },

    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// MAI with a modality that received no attention mass.
    #[error("MAI undefined: denominator modality received zero attention mass")]
    UndefinedMai,

    /// TAI for a token whose contribution score is zero.
    #[error("TAI undefined for token {token}: zero information contribution")]
    ZeroContribution { token: usize },

    /// TAI over a context that received no attention at all.
    #[error("TAI undefined: context received zero total attention")]
    ZeroAttention,

    /// Cosine similarity with an all-zero attention map.
    #[error("cosine similarity undefined for a zero-norm attention window")]
    ZeroNorm,

    /// A matrix that must be symmetric is not.
    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },

    /// A covariance matrix with a materially negative eigenvalue.
    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    /// A row expected to be a probability distribution is not.
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    /// Label sets for effect-size computation are empty or overlapping.
    #[error("invalid token labels: {0}")]
    Labels(String),

    /// A decode trace that was not produced by the model replaying it.
    #[error("trace does not match model at step {step}: {detail}")]
    TraceMismatch { step: usize, detail: String },

    /// A planted scenario whose property does not hold in the baseline run.
    #[error("scenario planting failed: {0}")]
    Planting(String),

    /// A run step whose inputs are missing (e.g. no sensitive-head set).
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Configuration could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
