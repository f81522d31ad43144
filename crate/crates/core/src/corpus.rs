//! Labeled documents, span-to-token label conversion and the JSONL corpus
//! format.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{build_vocab, Sequence, Vocabulary};

/// A hallucinated span over reference content tokens, `[begin, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub begin_token: usize,
    pub end_token: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenLabel {
    NonHallucinated,
    HallucinatedInitial,
    HallucinatedSubsequent,
}

impl TokenLabel {
    pub fn is_hallucinated(self) -> bool {
        self != TokenLabel::NonHallucinated
    }

    pub fn short(self) -> char {
        match self {
            TokenLabel::NonHallucinated => 'N',
            TokenLabel::HallucinatedInitial => 'I',
            TokenLabel::HallucinatedSubsequent => 'S',
        }
    }
}

/// Maps hallucinated spans onto per-token labels. Overlapping and adjacent
/// spans are merged first, so each maximal run gets exactly one
/// `HallucinatedInitial`.
pub fn spans_to_token_labels(
    reference_length: usize,
    spans: &[SpanAnnotation],
) -> Result<Vec<TokenLabel>> {
    let mut hallucinated = vec![false; reference_length];
    for s in spans {
        if s.begin_token >= s.end_token || s.end_token > reference_length {
            return Err(Error::InvalidSpan {
                begin: s.begin_token,
                end: s.end_token,
                len: reference_length,
            });
        }
        hallucinated[s.begin_token..s.end_token].fill(true);
    }
    let mut labels = Vec::with_capacity(reference_length);
    let mut prev = false;
    for h in hallucinated {
        labels.push(match (h, prev) {
            (false, _) => TokenLabel::NonHallucinated,
            (true, false) => TokenLabel::HallucinatedInitial,
            (true, true) => TokenLabel::HallucinatedSubsequent,
        });
        prev = h;
    }
    Ok(labels)
}

/// Inverse of [`spans_to_token_labels`]: one span per maximal run.
pub fn token_labels_to_spans(labels: &[TokenLabel]) -> Vec<SpanAnnotation> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, l) in labels.iter().enumerate() {
        match (l, start) {
            (TokenLabel::HallucinatedInitial, Some(b)) => {
                spans.push(SpanAnnotation {
                    begin_token: b,
                    end_token: i,
                });
                start = Some(i);
            }
            (TokenLabel::NonHallucinated, Some(b)) => {
                spans.push(SpanAnnotation {
                    begin_token: b,
                    end_token: i,
                });
                start = None;
            }
            (l, None) if l.is_hallucinated() => start = Some(i),
            _ => {}
        }
    }
    if let Some(b) = start {
        spans.push(SpanAnnotation {
            begin_token: b,
            end_token: labels.len(),
        });
    }
    spans
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDocument {
    pub id: String,
    /// BOS-prefixed source; no EOS.
    pub source: Sequence,
    /// Complete reference summary.
    pub reference: Sequence,
    /// One label per reference content token, if annotated.
    pub labels: Option<Vec<TokenLabel>>,
}

impl LabeledDocument {
    pub fn labels_or_err(&self) -> Result<&[TokenLabel]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::MissingLabels(self.id.clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<LabeledDocument>,
    pub vocabulary: Vocabulary,
}

impl Corpus {
    /// Validates ids, sequence shapes and label alignment.
    pub fn new(documents: Vec<LabeledDocument>, vocabulary: Vocabulary) -> Result<Self> {
        let mut ids = HashSet::new();
        for d in &documents {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::DuplicateDocument(d.id.clone()));
            }
            d.source.check_prefix(&vocabulary)?;
            d.reference.check_complete(&vocabulary)?;
            if let Some(labels) = &d.labels {
                let n = d.reference.content(&vocabulary).len();
                if labels.len() != n {
                    return Err(Error::InvalidSequence(format!(
                        "document {:?}: {} labels for {} reference tokens",
                        d.id,
                        labels.len(),
                        n
                    )));
                }
            }
        }
        Ok(Corpus {
            documents,
            vocabulary,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn require_labels(&self) -> Result<()> {
        for d in &self.documents {
            d.labels_or_err()?;
        }
        Ok(())
    }

    /// Writes the corpus back out in the JSONL record format.
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for d in &self.documents {
            let record = CorpusRecord {
                id: d.id.clone(),
                source: self.vocabulary.decode(&d.source),
                reference: self.vocabulary.decode(&d.reference),
                spans: d.labels.as_ref().map(|l| {
                    token_labels_to_spans(l)
                        .into_iter()
                        .map(SpanField::Object)
                        .collect()
                }),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub source: String,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<SpanField>>,
}

/// Spans are accepted either as objects or as `[begin, end]` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpanField {
    Object(SpanAnnotation),
    Pair([usize; 2]),
}

impl From<&SpanField> for SpanAnnotation {
    fn from(f: &SpanField) -> Self {
        match *f {
            SpanField::Object(s) => s,
            SpanField::Pair([b, e]) => SpanAnnotation {
                begin_token: b,
                end_token: e,
            },
        }
    }
}

/// Reads a JSONL corpus. With `vocab = None` a fresh vocabulary is built
/// from the file itself.
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file), path, vocab)
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    path: &Path,
    vocab: Option<&Vocabulary>,
) -> Result<Corpus> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push((i + 1, rec));
    }

    let vocabulary = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(
            records
                .iter()
                .map(|(_, r)| (r.source.as_str(), r.reference.as_str())),
        )?,
    };

    let mut documents = Vec::with_capacity(records.len());
    let mut ids = HashSet::new();
    for (line, rec) in records {
        if !ids.insert(rec.id.clone()) {
            return Err(parse_err(line, format!("duplicate document id {:?}", rec.id)));
        }
        let source = vocabulary.encode(&rec.source, false)?;
        let reference = vocabulary.encode(&rec.reference, true)?;
        let labels = match &rec.spans {
            None => None,
            Some(spans) => {
                let spans: Vec<SpanAnnotation> = spans.iter().map(Into::into).collect();
                let n = reference.content(&vocabulary).len();
                Some(spans_to_token_labels(n, &spans).map_err(|e| parse_err(line, e.to_string()))?)
            }
        };
        documents.push(LabeledDocument {
            id: rec.id,
            source,
            reference,
            labels,
        });
    }
    Corpus::new(documents, vocabulary)
}
