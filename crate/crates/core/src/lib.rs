//! Phrase-similarity pipeline for anchor/target/context records.
//!
//! The crate covers the whole path from a CSV of scored phrase pairs to a
//! blended prediction file:
//!
//! - [`corpus`]: loading, validation, anchor-grouped holdout and stratified k-fold splits
//! - [`textprep`]: word vocabulary and the V1/V2/V3 input layouts with per-token gold scores
//! - [`encoder`]: a small transformer encoder with a sigmoid score per token
//! - [`training`]: masked binary cross-entropy, exact gradients, clipping, Adam and AWP
//! - [`metrics`]: Pearson correlation and cross-validation reports
//! - [`ensemble`]: weighted blending and simplex grid search for the weights
//!
//! ```
//! use phrasesim::corpus::ContextTable;
//! use phrasesim::textprep::{GroupedExample, SequenceBuilder, Vocabulary, SENTINEL};
//!
//! let vocab = Vocabulary::from_texts(["a b c d A47"], 100).unwrap();
//! let contexts = ContextTable::new();
//! let builder = SequenceBuilder::new(&vocab, &contexts, 400);
//! let group = GroupedExample {
//!     anchor: "a".into(),
//!     context: "A47".into(),
//!     targets: vec!["b".into(), "c d".into()],
//!     scores: vec![0.5, 0.75],
//!     ids: vec!["p1".into(), "p2".into()],
//! };
//! let seq = &builder.v3(&group).unwrap()[0];
//! assert_eq!(seq.token_targets[6], 0.5);
//! assert_eq!(seq.token_targets[..6], [SENTINEL; 6]);
//! ```

pub mod corpus;
pub mod encoder;
pub mod ensemble;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod textprep;
pub mod training;

pub use corpus::{PhraseRecord, Score};
pub use encoder::{EncoderConfig, EncoderParams};
pub use metrics::ScoreVector;
pub use pipeline::Variant;

/// Umbrella error for operations that cross module boundaries.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Text(#[from] textprep::TextError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Training(#[from] training::TrainingError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Ensemble(#[from] ensemble::EnsembleError),
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
}

// Book chapters are compiled as doctests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/layouts.md")]
    mod layouts {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
