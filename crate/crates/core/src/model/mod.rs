//! Next-token probability models.
//!
//! Every model hands back a validated [`Distribution`] over the full
//! vocabulary and is deterministic: equal arguments give bitwise-equal
//! vectors. Models are shared read-only across decoding threads.

mod bridge;
mod copy;
mod ngram;
mod table;

pub use bridge::{
    BridgeConfig, BridgeConnection, BridgeModel, ConformanceReport, GoldenExchange,
    DEFAULT_TIMEOUT, REPLY_TOLERANCE,
};
pub use copy::CopyMixtureModel;
pub use ngram::{train_ngram, NGramLM, TrainingFields};
pub use table::{SourceTable, TableWorld};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::vocab::{Sequence, Vocabulary};

pub trait LanguageModel: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;
}

/// `p(· | prefix, source)`.
pub trait ConditionalModel: LanguageModel {
    fn cond_dist(&self, source: &Sequence, prefix: &Sequence) -> Result<Distribution>;
}

/// `p(· | prefix)`, with no access to the source.
pub trait MarginalModel: LanguageModel {
    fn marginal_dist(&self, prefix: &Sequence) -> Result<Distribution>;
}

/// Fails unless both models use the same vocabulary.
pub fn check_same_vocab(a: &Vocabulary, b: &Vocabulary) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::VocabMismatch(format!(
            "{} tokens (bos {}, eos {}) vs {} tokens (bos {}, eos {})",
            a.len(),
            a.bos(),
            a.eos(),
            b.len(),
            b.bos(),
            b.eos()
        )))
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
}

impl<T: ConditionalModel + ?Sized> ConditionalModel for &T {
    fn cond_dist(&self, source: &Sequence, prefix: &Sequence) -> Result<Distribution> {
        (**self).cond_dist(source, prefix)
    }
}

impl<T: MarginalModel + ?Sized> MarginalModel for &T {
    fn marginal_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        (**self).marginal_dist(prefix)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }
}

impl<T: ConditionalModel + ?Sized> ConditionalModel for Box<T> {
    fn cond_dist(&self, source: &Sequence, prefix: &Sequence) -> Result<Distribution> {
        (**self).cond_dist(source, prefix)
    }
}

impl<T: MarginalModel + ?Sized> MarginalModel for Box<T> {
    fn marginal_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        (**self).marginal_dist(prefix)
    }
}
