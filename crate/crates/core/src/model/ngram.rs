use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConditionalModel, LanguageModel, MarginalModel};
use crate::corpus::Corpus;
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::vocab::{Sequence, TokenId, Vocabulary};

const FORMAT: &str = "cpmi-ngram";
const VERSION: u32 = 1;

/// Which corpus fields feed language-model training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainingFields {
    #[default]
    ReferencesOnly,
    SourcesAndReferences,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    tokens: BTreeMap<TokenId, u64>,
    total: u64,
}

/// Add-k smoothed n-gram model with recursive backoff.
///
/// The longest observed context (up to `order - 1` tokens) is used; an
/// unseen context falls back one token shorter, ending at the add-k unigram
/// over the whole vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    k: f64,
    vocab: Vocabulary,
    counts: BTreeMap<Vec<TokenId>, ContextCounts>,
}

impl NGramLM {
    pub fn new(vocab: Vocabulary, order: usize, k: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidModel("n-gram order must be at least 1".into()));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidModel(format!("smoothing constant {k} must be > 0")));
        }
        Ok(NGramLM {
            order,
            k,
            vocab,
            counts: BTreeMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// Context for predicting the token after `prefix`: the last
    /// `order - 1` ids of the BOS-padded history.
    fn context(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let n = self.order - 1;
        let body = prefix.get(1..).unwrap_or(&[]);
        let mut ctx = Vec::with_capacity(n);
        let pad = n.saturating_sub(body.len());
        ctx.extend(std::iter::repeat(self.vocab.bos()).take(pad));
        ctx.extend_from_slice(&body[body.len() - (n - pad)..]);
        ctx
    }

    /// Records `token` following `prefix` at every context length.
    pub fn observe(&mut self, prefix: &[TokenId], token: TokenId) {
        let ctx = self.context(prefix);
        for len in 0..=ctx.len() {
            let entry = self.counts.entry(ctx[ctx.len() - len..].to_vec()).or_default();
            *entry.tokens.entry(token).or_insert(0) += 1;
            entry.total += 1;
        }
    }

    /// Adds every transition of a BOS-initial sequence.
    pub fn observe_sequence(&mut self, ids: &[TokenId]) {
        for i in 1..ids.len() {
            self.observe(&ids[..i], ids[i]);
        }
    }

    /// True when the full-order context after `prefix` has been observed.
    pub fn has_context(&self, prefix: &[TokenId]) -> bool {
        self.counts
            .get(&self.context(prefix))
            .is_some_and(|c| c.total > 0)
    }

    pub fn next_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        prefix.check_prefix(&self.vocab)?;
        let ctx = self.context(prefix.ids());
        let counts = (0..=ctx.len())
            .rev()
            .find_map(|len| {
                self.counts
                    .get(&ctx[ctx.len() - len..])
                    .filter(|c| c.total > 0)
            });
        let v = self.vocab.len() as f64;
        let log_probs = match counts {
            Some(c) => {
                let denom = (c.total as f64 + self.k * v).ln();
                (0..self.vocab.len() as TokenId)
                    .map(|id| {
                        let n = c.tokens.get(&id).copied().unwrap_or(0) as f64;
                        (n + self.k).ln() - denom
                    })
                    .collect()
            }
            None => vec![-v.ln(); self.vocab.len()],
        };
        Distribution::normalize_log(log_probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_repr())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let repr: NGramRepr = serde_json::from_reader(file)?;
        Self::from_repr(repr)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_repr())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_repr(serde_json::from_str(s)?)
    }

    fn to_repr(&self) -> NGramRepr {
        let counts = self
            .counts
            .iter()
            .flat_map(|(ctx, c)| {
                c.tokens.iter().map(move |(&token, &count)| CountRepr {
                    context: ctx.clone(),
                    token,
                    count,
                })
            })
            .collect();
        NGramRepr {
            format: FORMAT.into(),
            version: VERSION,
            order: self.order,
            k: self.k,
            vocab: self.vocab.clone(),
            counts,
        }
    }

    fn from_repr(repr: NGramRepr) -> Result<Self> {
        if repr.format != FORMAT || repr.version != VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported model file {} v{}",
                repr.format, repr.version
            )));
        }
        let mut lm = NGramLM::new(repr.vocab, repr.order, repr.k)?;
        for c in repr.counts {
            if c.context.len() >= lm.order {
                return Err(Error::InvalidModel(format!(
                    "context {:?} too long for order {}",
                    c.context, lm.order
                )));
            }
            lm.vocab.check_id(c.token)?;
            for &id in &c.context {
                lm.vocab.check_id(id)?;
            }
            let entry = lm.counts.entry(c.context).or_default();
            *entry.tokens.entry(c.token).or_insert(0) += c.count;
            entry.total += c.count;
        }
        Ok(lm)
    }
}

#[derive(Serialize, Deserialize)]
struct NGramRepr {
    format: String,
    version: u32,
    order: usize,
    k: f64,
    vocab: Vocabulary,
    counts: Vec<CountRepr>,
}

#[derive(Serialize, Deserialize)]
struct CountRepr {
    context: Vec<TokenId>,
    token: TokenId,
    count: u64,
}

/// Counts n-grams over the corpus references (and optionally the sources,
/// which get an EOS appended).
pub fn train_ngram(
    corpus: &Corpus,
    order: usize,
    k: f64,
    fields: TrainingFields,
) -> Result<NGramLM> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut lm = NGramLM::new(corpus.vocabulary.clone(), order, k)?;
    for doc in &corpus.documents {
        if fields == TrainingFields::SourcesAndReferences {
            let src = doc.source.with(corpus.vocabulary.eos());
            lm.observe_sequence(src.ids());
        }
        lm.observe_sequence(doc.reference.ids());
    }
    Ok(lm)
}

impl LanguageModel for NGramLM {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
}

impl MarginalModel for NGramLM {
    fn marginal_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        self.next_dist(prefix)
    }
}

/// Ignores the source.
impl ConditionalModel for NGramLM {
    fn cond_dist(&self, _source: &Sequence, prefix: &Sequence) -> Result<Distribution> {
        self.next_dist(prefix)
    }
}
