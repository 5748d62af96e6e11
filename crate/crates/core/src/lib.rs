//! Training and evaluation toolkit for transformer-based sequential
//! recommendation with a Barlow Twins redundancy-reduction regularizer.
//!
//! The pipeline runs: raw interaction logs ([`corpus`]) -> causal transformer
//! encoder ([`encoder`]) -> prediction + redundancy-reduction losses
//! ([`objectives`], [`pairing`]) -> multi-task optimization ([`trainer`]) ->
//! full-catalog ranking metrics and embedding diagnostics ([`evaluator`]).
//! Everything is seeded and deterministic: identical inputs, config, and seed
//! reproduce identical artifacts byte for byte.

pub mod corpus;
pub mod encoder;
pub mod evaluator;
pub mod objectives;
pub mod pairing;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod util;

use thiserror::Error;

/// Dense user identifier; 1-based (0 is never a valid user).
pub type UserId = u32;
/// Dense item identifier; 1-based (0 is the reserved padding id).
pub type ItemId = u32;
/// Event time in integer seconds.
pub type Timestamp = u64;

/// Reserved padding id for sequence prefixes.
pub const PADDING_ID: ItemId = 0;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("non-finite value in tensor {tensor}")]
    Numerical { tensor: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Train {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
