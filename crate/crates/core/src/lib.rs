//! Strategy-conditioned human/robot co-policy learning from two-agent
//! demonstrations on a small collaborative fetch game.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod demos;
pub mod env;
pub mod eval;
pub mod expert;
pub mod model;
pub mod ppo;
pub mod train;

pub use cogail_nn as nn;
pub use cogail_nn::Scalar;

/// Scalar used for training and stored in checkpoints.
pub type Real = f32;
pub type CoPolicy = model::CoPolicy<Real>;
pub type RecognitionNet = model::RecognitionNet<Real>;
pub type Discriminator = model::Discriminator<Real>;
pub type Learner = train::Learner<Real>;
pub type Trainer<'a> = train::Trainer<'a, Real>;
pub type Checkpoint = checkpoint::Checkpoint<Real>;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error(transparent)]
    Nn(#[from] cogail_nn::NnError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },
    #[error("checksum mismatch: file is truncated or corrupt")]
    Checksum,
    #[error("scripted expert failed {0} consecutive times")]
    ExpertFailed(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
