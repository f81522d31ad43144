//! Decoding engine for conditional sequence models with conditional
//! pointwise-mutual-information (CPMI) scoring.
//!
//! The crate provides log-probability, PMI and CPMI beam search over any
//! [`ConditionalModel`](model::ConditionalModel) /
//! [`MarginalModel`](model::MarginalModel) pair, token-level hallucination
//! analyses, a λ/τ grid-search tuner and a JSON-lines bridge to out-of-process
//! models.

pub mod corpus;
pub mod decoder;
pub mod dist;
pub mod error;
pub mod eval;
pub mod model;
pub mod scoring;
pub mod synth;
pub mod tuner;
pub mod vocab;

pub use corpus::{load_corpus, Corpus, LabeledDocument, SpanAnnotation, TokenLabel};
pub use decoder::{beam_search, decode_corpus, exhaustive_argmax, DecodeResult, Hypothesis};
pub use dist::Distribution;
pub use error::{Error, Result};
pub use model::{ConditionalModel, LanguageModel, MarginalModel};
pub use scoring::{ScoreStrategy, StepContext, StepScore};
pub use vocab::{Sequence, TokenId, Vocabulary};
