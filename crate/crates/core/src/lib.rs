//! Conditional density estimation with noise-contrastive losses.
//!
//! This crate implements a family of classification objectives that treat
//! class scores as unnormalized log-densities: plain cross-entropy (NLL),
//! soft-target cross-entropy, InfoNCE with in-batch negatives, and a
//! soft-target variant of InfoNCE in which the aggregate score of a soft
//! label vector plays the role of the positive while the soft targets of
//! the other batch rows act as negatives. Alongside the losses it provides
//! the machinery needed to study them end to end:
//!
//! | module          | contents                                              |
//! |-----------------|-------------------------------------------------------|
//! | [`numerics`]    | dense matrix kernel, stable log-sum-exp/softmax, seeded RNG |
//! | [`distributions`] | label smoothing, mixup, the continuous categorical, GMM benchmark data |
//! | [`losses`]      | the loss family and its shared scoring interface      |
//! | [`gradients`]   | analytic gradients, scoring chain rules, finite-difference harness |
//! | [`models`]      | embedding scoring model, Adam/SGD, deterministic training loop |
//! | [`eval`]        | KL estimation error, top-k accuracy, calibration, information-bound audits |
//!
//! Everything is deterministic given a seed: the same configuration produces
//! bitwise-identical training trajectories and metrics.

use thiserror::Error;

pub mod distributions;
pub mod eval;
pub mod gradients;
pub mod losses;
pub mod models;
pub mod numerics;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received an empty slice or matrix where values were required.
    #[error("empty input")]
    EmptyInput,

    /// Two arguments have incompatible dimensions.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A computation produced a numerically unusable result.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Serialization(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Serialization(err.to_string())
    }
}
