//! Train compact convolutional VAEs on 32x32 images and score inputs for
//! out-of-distribution detection.
//!
//! The crate is organized around five pieces:
//!
//! - [`tensor`]: f32 tensors, reverse-mode differentiation, Adam.
//! - [`vae`]: the DCGAN-style VAE (ELBO training, importance-weighted
//!   likelihood estimation, checkpoints).
//! - [`data`]: IDX / CIFAR-10 binary / raw-tensor ingestion plus synthetic
//!   noise and constant images.
//! - [`scores`]: the OOD scorers — likelihood regret (four optimization
//!   targets), raw likelihood, PNG input complexity, background-model
//!   likelihood ratio, and latent Mahalanobis distance.
//! - [`eval`]: AUCROC / AUPRC / FPR80 / BPD and ROC-histogram emission.
//!
//! Every scorer follows one convention: **larger score = more out of
//! distribution**.

pub mod data;
pub mod eval;
pub mod scores;
pub mod tensor;
pub mod vae;

/// Crate-wide error type. Variants map onto the failure categories of the
/// public operations: shape/dimension misuse, bad argument values, numeric
/// failures (NaN/divergence), ingestion and checkpoint problems.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("optimizer error: {0}")]
    Optim(String),
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("score error: {0}")]
    Score(String),
    #[error("training error: {0}")]
    Fit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
