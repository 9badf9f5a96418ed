use std::io;

use thiserror::Error;

use crate::lexicon::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary is empty after filtering (min_count = {min_count})")]
    EmptyVocabulary { min_count: usize },

    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),

    #[error("token {0:?} is reserved and cannot be part of the output vocabulary")]
    ReservedToken(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("out-of-vocabulary token {token:?} at position {position}")]
    OutOfVocabulary { token: String, position: usize },

    #[error("invalid token id {id} at position {position}")]
    InvalidTokenId { id: TokenId, position: usize },

    #[error("position {position} is out of range for a sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("potential undefined for MASK target at position {0}")]
    MaskTarget(usize),

    #[error("sequence contains MASK at position {0}; the joint is undefined for masked sequences")]
    MaskInSequence(usize),

    #[error("sequences have mixed lengths ({expected} and {found}); ranking requires a fixed length")]
    MixedLengths { expected: usize, found: usize },

    #[error("enumeration of {states} states exceeds the cap of {cap}; exact computation is for small instances only")]
    EnumerationCap { states: u128, cap: u64 },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("need at least {needed} sentences, got {found}")]
    TooFewSentences { needed: usize, found: usize },

    #[error("no {0}-grams in the corpus")]
    NoNgrams(usize),

    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),

    #[error("distributions are over different state spaces")]
    StateSpaceMismatch,

    #[error("power iteration did not converge (residual {residual:e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("scorer is not trainable")]
    NotTrainable,

    #[error("training diverged at epoch {epoch}: pseudo log-likelihood = {pll}")]
    Diverged { epoch: usize, pll: f64 },

    #[error("no sentence of length {0} available for initialization")]
    NoSentenceOfLength(usize),

    #[error("table cap of {0} entries exceeded")]
    TableFull(usize),

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch at index {index}: local {local:?}, remote {remote:?}")]
    VocabMismatch {
        index: usize,
        local: Option<String>,
        remote: Option<String>,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("scorer endpoint reported: {0}")]
    Remote(String),

    #[error("timed out after {0:?} waiting for the scorer endpoint")]
    Timeout(std::time::Duration),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
