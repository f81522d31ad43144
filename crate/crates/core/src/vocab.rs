//! Token ids, the closed vocabulary and id sequences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Closed token inventory including the reserved BOS and EOS markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    bos: TokenId,
    eos: TokenId,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(repr.tokens, repr.bos, repr.eos)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            bos: v.bos,
            eos: v.eos,
        }
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, bos: TokenId, eos: TokenId) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::InvalidVocabulary(format!(
                "need at least 3 tokens, got {}",
                tokens.len()
            )));
        }
        if bos == eos {
            return Err(Error::InvalidVocabulary("bos and eos share an id".into()));
        }
        for id in [bos, eos] {
            if id as usize >= tokens.len() {
                return Err(Error::InvalidVocabulary(format!(
                    "reserved id {id} outside 0..{}",
                    tokens.len()
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            bos,
            eos,
        })
    }

    /// Vocabulary with `<bos>`=0, `<eos>`=1 followed by `words` in order.
    pub fn with_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![BOS_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(Into::into));
        Vocabulary::new(tokens, 0, 1)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos
    }

    /// Ids that may appear between BOS and EOS.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len() as TokenId).filter(move |&id| !self.is_special(id))
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                id,
                size: self.len(),
            })
        }
    }

    /// Encodes whitespace-separated, lowercased `text` as a BOS-prefixed
    /// sequence, appending EOS when `complete` is set.
    pub fn encode(&self, text: &str, complete: bool) -> Result<Sequence> {
        let mut ids = vec![self.bos];
        for word in tokenize(text) {
            let id = self.id(&word).ok_or(Error::UnknownToken(word))?;
            ids.push(id);
        }
        if complete {
            ids.push(self.eos);
        }
        Ok(Sequence(ids))
    }

    /// Space-joined surface form of the content tokens of `seq`.
    pub fn decode(&self, seq: &Sequence) -> String {
        seq.ids()
            .iter()
            .filter(|&&id| !self.is_special(id))
            .map(|&id| self.token(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercase and split on whitespace.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Builds a vocabulary from (source, reference) text pairs: BOS=0, EOS=1,
/// then every distinct token in order of first appearance.
pub fn build_vocab<'a, I>(documents: I) -> Result<Vocabulary>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut words: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut any = false;
    for (source, reference) in documents {
        any = true;
        for w in tokenize(source).chain(tokenize(reference)) {
            if w == BOS_TOKEN || w == EOS_TOKEN {
                return Err(Error::InvalidVocabulary(format!(
                    "reserved marker {w:?} found in text"
                )));
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    Vocabulary::with_words(words)
}

/// A list of token ids. Complete sequences are `BOS content* EOS`, prefixes
/// are `BOS content*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(pub Vec<TokenId>);

impl Sequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Sequence(ids)
    }

    pub fn bos(vocab: &Vocabulary) -> Self {
        Sequence(vec![vocab.bos()])
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<TokenId> {
        self.0.last().copied()
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn with(&self, id: TokenId) -> Sequence {
        let mut ids = Vec::with_capacity(self.0.len() + 1);
        ids.extend_from_slice(&self.0);
        ids.push(id);
        Sequence(ids)
    }

    /// Tokens strictly between the leading BOS and an optional trailing EOS.
    pub fn content(&self, vocab: &Vocabulary) -> &[TokenId] {
        let mut ids = &self.0[..];
        if ids.first() == Some(&vocab.bos()) {
            ids = &ids[1..];
        }
        if ids.last() == Some(&vocab.eos()) {
            ids = &ids[..ids.len() - 1];
        }
        ids
    }

    pub fn is_prefix_form(&self, vocab: &Vocabulary) -> bool {
        self.0.first() == Some(&vocab.bos())
            && self.0[1..]
                .iter()
                .all(|&id| !vocab.is_special(id) && (id as usize) < vocab.len())
    }

    pub fn is_complete(&self, vocab: &Vocabulary) -> bool {
        self.0.len() >= 2
            && self.0.last() == Some(&vocab.eos())
            && Sequence(self.0[..self.0.len() - 1].to_vec()).is_prefix_form(vocab)
    }

    pub fn check_prefix(&self, vocab: &Vocabulary) -> Result<()> {
        if self.is_prefix_form(vocab) {
            Ok(())
        } else {
            Err(Error::InvalidSequence(format!(
                "{:?} is not a BOS-initial, EOS-free prefix",
                self.0
            )))
        }
    }

    pub fn check_complete(&self, vocab: &Vocabulary) -> Result<()> {
        if self.is_complete(vocab) {
            Ok(())
        } else {
            Err(Error::InvalidSequence(format!(
                "{:?} is not a complete BOS ... EOS sequence",
                self.0
            )))
        }
    }
}

impl From<Vec<TokenId>> for Sequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Sequence(ids)
    }
}
