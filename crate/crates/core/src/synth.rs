//! Seeded generators for table worlds.
//!
//! [`random_table_world`] builds small fully prefix-dependent worlds for
//! exhaustive checks. [`hallucination_benchmark`] builds a labeled corpus
//! whose summarizer is prone to a generic, source-irrelevant token at one
//! high-entropy step per document.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, LabeledDocument, SpanAnnotation, spans_to_token_labels};
use crate::dist::Distribution;
use crate::error::Result;
use crate::model::{SourceTable, TableWorld};
use crate::vocab::{Sequence, TokenId, Vocabulary};

fn random_row<R: Rng>(rng: &mut R, size: usize, bos: TokenId) -> Distribution {
    let sharpness = rng.gen_range(0.2..4.0);
    loop {
        let w: Vec<f64> = (0..size)
            .map(|i| {
                if i == bos as usize || rng.gen_bool(0.1) {
                    0.0
                } else {
                    let e: f64 = -(1.0 - rng.gen::<f64>()).ln();
                    e.powf(sharpness)
                }
            })
            .collect();
        if let Ok(d) = Distribution::from_weights(&w) {
            return d;
        }
    }
}

/// A world with `n_sources` distinct sources and an explicit row for every
/// EOS-free prefix of up to `n_max` content tokens. Vocabulary is BOS, EOS
/// and `vocab_size - 2` words.
pub fn random_table_world(seed: u64, vocab_size: usize, n_max: usize, n_sources: usize) -> TableWorld {
    assert!(vocab_size >= 3 && n_sources >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::with_words((0..vocab_size - 2).map(|i| format!("t{i}"))).unwrap();
    let content: Vec<TokenId> = vocab.content_ids().collect();

    let mut prefixes = vec![vec![vocab.bos()]];
    let mut frontier = prefixes.clone();
    for _ in 0..n_max {
        let mut next = Vec::new();
        for p in &frontier {
            for &c in &content {
                let mut q = p.clone();
                q.push(c);
                next.push(q);
            }
        }
        prefixes.extend(next.iter().cloned());
        frontier = next;
    }

    let mut seen = HashSet::new();
    let mut raw_prior: Vec<f64> = Vec::new();
    let mut entries = Vec::new();
    while entries.len() < n_sources {
        let len = rng.gen_range(0..=3);
        let mut src = vec![vocab.bos()];
        src.extend((0..len).map(|_| content[rng.gen_range(0..content.len())]));
        if !seen.insert(src.clone()) {
            // Short sources collide quickly in tiny vocabularies.
            if seen.len() >= 1 + content.len() + content.len().pow(2) + content.len().pow(3) {
                break;
            }
            continue;
        }
        let mut table = SourceTable::default();
        for p in &prefixes {
            table.exact.insert(p.clone(), random_row(&mut rng, vocab.len(), vocab.bos()));
        }
        raw_prior.push(rng.gen_range(0.1..1.0));
        entries.push((Sequence::new(src), 0.0, table));
    }
    let total: f64 = raw_prior.iter().sum();
    for (e, p) in entries.iter_mut().zip(&raw_prior) {
        e.1 = p / total;
    }
    // renormalized priors may be off by an ulp; fold the residue into the first
    let residue = 1.0 - entries.iter().map(|e| e.1).sum::<f64>();
    entries[0].1 += residue;
    TableWorld::new(vocab, entries).unwrap()
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub documents: usize,
    pub content_words: usize,
    pub generic_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of references that contain a hallucinated span.
    pub hallucinated_fraction: f64,
    /// Rows cover prefixes up to this many content tokens.
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            documents: 200,
            content_words: 300,
            generic_words: 3,
            min_len: 6,
            max_len: 9,
            hallucinated_fraction: 0.3,
            max_positions: 16,
            seed: 2023,
        }
    }
}

/// The one step per document where the model is uncertain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignatedStep {
    pub doc: usize,
    /// 0-based index among content tokens.
    pub position: usize,
    pub distractor: TokenId,
    /// The source-supported alternative.
    pub faithful: TokenId,
}

#[derive(Debug, Clone)]
pub struct HallucinationBenchmark {
    pub world: TableWorld,
    pub corpus: Corpus,
    pub designated: Vec<DesignatedStep>,
    pub generic: Vec<TokenId>,
}

// Row masses.
const REF_MASS: f64 = 0.80;
const GENERIC_MASS: f64 = 0.03;
const DISTRACTOR_MASS: f64 = 0.12;
const FAITHFUL_MASS: f64 = 0.10;
const EOS_MASS: f64 = 0.90;
const TINY: f64 = 1e-4;

/// Builds the benchmark. For each document with faithful content
/// `f_0..f_{m-1}`:
///
/// * most rows put 0.8 on the reference token, 0.03 on each generic word
///   and spread the rest;
/// * at the designated step `j` the row is flat over a random subset of
///   words with the document's distractor (a generic word) on top at 0.12
///   and `f_j` second at 0.10;
/// * a hallucinated reference has the distractor at `j` (initial) and an
///   unsupported word at `j + 1` (subsequent); a faithful one keeps `f_j`;
/// * after the last token the row puts 0.9 on EOS.
pub fn hallucination_benchmark(cfg: &BenchmarkConfig) -> Result<HallucinationBenchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words: Vec<String> = (0..cfg.generic_words).map(|i| format!("g{i}")).collect();
    words.extend((0..cfg.content_words).map(|i| format!("w{i:03}")));
    let vocab = Vocabulary::with_words(words)?;
    let size = vocab.len();
    let (bos, eos) = (vocab.bos(), vocab.eos());
    let generic: Vec<TokenId> = (2..2 + cfg.generic_words as TokenId).collect();
    let content: Vec<TokenId> =
        (2 + cfg.generic_words as TokenId..size as TokenId).collect();

    let spread_row = |peaks: &[(TokenId, f64)], pool: &[TokenId]| -> Distribution {
        let mut w = vec![0.0; size];
        let used: f64 = peaks.iter().map(|p| p.1).sum();
        let free: Vec<TokenId> = pool
            .iter()
            .copied()
            .filter(|id| !peaks.iter().any(|p| p.0 == *id))
            .collect();
        for &id in &free {
            w[id as usize] = (1.0 - used) / free.len() as f64;
        }
        for &(id, m) in peaks {
            w[id as usize] += m;
        }
        Distribution::from_weights(&w).expect("non-empty row")
    };
    let all_but_bos: Vec<TokenId> = (0..size as TokenId).filter(|&i| i != bos).collect();

    let mut entries = Vec::new();
    let mut documents = Vec::new();
    let mut designated = Vec::new();
    let mut seen_sources = HashSet::new();
    let n_hall = (cfg.documents as f64 * cfg.hallucinated_fraction).round() as usize;
    let mut hallucinated: Vec<bool> = (0..cfg.documents).map(|i| i < n_hall).collect();
    hallucinated.shuffle(&mut rng);

    for (doc, &is_hall) in hallucinated.iter().enumerate() {
        let m = rng.gen_range(cfg.min_len..=cfg.max_len);
        let faithful: Vec<TokenId> = content.choose_multiple(&mut rng, m).copied().collect();
        let mut source = vec![bos];
        source.extend(&faithful);
        source.extend((0..4).map(|_| content[rng.gen_range(0..content.len())]));
        if !seen_sources.insert(source.clone()) {
            // vanishingly unlikely with 300 words; fail loudly rather than skew the corpus
            panic!("duplicate synthetic source");
        }
        let j = rng.gen_range(1..=m - 3);
        let distractor = generic[rng.gen_range(0..generic.len())];

        let mut reference = faithful.clone();
        if is_hall {
            reference[j] = distractor;
            let unsupported = loop {
                let w = content[rng.gen_range(0..content.len())];
                if !source.contains(&w) {
                    break w;
                }
            };
            reference[j + 1] = unsupported;
        }

        let n_flat = rng.gen_range(40..=content.len() - 2);
        let mut flat: Vec<TokenId> = content
            .iter()
            .copied()
            .filter(|&w| w != faithful[j])
            .collect::<Vec<_>>()
            .choose_multiple(&mut rng, n_flat)
            .copied()
            .collect();
        flat.sort_unstable();

        let mut positional = Vec::with_capacity(cfg.max_positions + 1);
        for t in 0..=cfg.max_positions {
            let row = if t == j {
                spread_row(
                    &[
                        (distractor, DISTRACTOR_MASS),
                        (faithful[j], FAITHFUL_MASS),
                        (eos, TINY),
                    ],
                    &flat,
                )
            } else if t < m {
                let mut peaks = vec![(reference[t], REF_MASS)];
                peaks.extend(
                    generic
                        .iter()
                        .filter(|&&g| g != reference[t])
                        .map(|&g| (g, GENERIC_MASS)),
                );
                spread_row(&peaks, &all_but_bos)
            } else {
                spread_row(&[(eos, EOS_MASS)], &all_but_bos)
            };
            positional.push(row);
        }
        entries.push((
            Sequence::new(source.clone()),
            1.0 / cfg.documents as f64,
            SourceTable {
                positional,
                ..Default::default()
            },
        ));

        let mut ref_ids = vec![bos];
        ref_ids.extend(&reference);
        ref_ids.push(eos);
        let spans = if is_hall {
            vec![SpanAnnotation {
                begin_token: j,
                end_token: j + 2,
            }]
        } else {
            Vec::new()
        };
        documents.push(LabeledDocument {
            id: format!("syn{doc:04}"),
            source: Sequence::new(source),
            reference: Sequence::new(ref_ids),
            labels: Some(spans_to_token_labels(m, &spans)?),
        });
        designated.push(DesignatedStep {
            doc,
            position: j,
            distractor,
            faithful: faithful[j],
        });
    }

    // 1/n summed n times can miss 1 by an ulp
    let residue = 1.0 - entries.iter().map(|e| e.1).sum::<f64>();
    entries[0].1 += residue;
    let world = TableWorld::new(vocab.clone(), entries)?;
    let corpus = Corpus::new(documents, vocab)?;
    Ok(HallucinationBenchmark {
        world,
        corpus,
        designated,
        generic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConditionalModel;
    use crate::scoring::shannon_entropy;

    #[test]
    fn random_worlds_are_deterministic() {
        let a = random_table_world(5, 4, 2, 3);
        let b = random_table_world(5, 4, 2, 3);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.sources().len(), 3);
        // every prefix row has zero mass on BOS
        for x in 0..3 {
            for row in a.table(x).exact.values() {
                assert_eq!(row.log_prob(0), f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn small_benchmark_shape() {
        let cfg = BenchmarkConfig {
            documents: 10,
            ..Default::default()
        };
        let b = hallucination_benchmark(&cfg).unwrap();
        assert_eq!(b.corpus.len(), 10);
        assert_eq!(b.designated.len(), 10);
        for d in &b.designated {
            let doc = &b.corpus.documents[d.doc];
            let prefix = Sequence::new(doc.reference.ids()[..d.position + 1].to_vec());
            let row = b.world.cond_dist(&doc.source, &prefix).unwrap();
            assert_eq!(row.argmax(), d.distractor);
            assert!(shannon_entropy(&row) >= 3.0);
        }
        let n_hall = b
            .corpus
            .documents
            .iter()
            .filter(|d| d.labels.as_ref().unwrap().iter().any(|l| l.is_hallucinated()))
            .count();
        assert_eq!(n_hall, 3);
    }
}
