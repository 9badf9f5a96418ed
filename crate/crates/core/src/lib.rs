//! Masked language models read as Markov random fields.
//!
//! A scorer maps a sequence with one masked slot to a vector of logits over
//! the output vocabulary. Summing the logit of each observed token with its
//! own slot masked gives an unnormalized log-joint over fixed-length
//! sequences. This crate provides that joint, exact enumeration for small
//! cases, pseudo-likelihood training, Gibbs-style samplers, a dense-kernel
//! oracle and the usual corpus metrics.
//!
//! Positions are 0-based throughout the Rust API. Files and the wire
//! protocol use 1-based positions.

pub mod error;
pub mod evalkit;
pub mod fixtures;
pub mod lexicon;
pub mod loglinear;
pub mod mrf;
pub mod oracle;
pub mod protocol;
pub mod samplers;
pub mod tabular;
pub mod training;

pub use error::{Error, Result};
pub use lexicon::{Casing, Corpus, MaskedSequence, OovPolicy, Sequence, TokenId, Vocabulary};
pub use loglinear::LogLinearScorer;
pub use mrf::Scorer;
pub use protocol::ExternalScorer;
pub use tabular::TabularScorer;
pub use training::TrainableScorer;
