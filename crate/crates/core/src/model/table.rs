use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ConditionalModel, LanguageModel, MarginalModel};
use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::vocab::{Sequence, TokenId, Vocabulary};

/// Conditional rows for one source.
///
/// Rows in `exact` are keyed by the full prefix. Otherwise the row at index
/// `prefix.len() - 1` of `positional` applies, so a row is chosen by how
/// many content tokens have been generated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceTable {
    pub exact: HashMap<Vec<TokenId>, Distribution>,
    pub positional: Vec<Distribution>,
}

impl SourceTable {
    pub fn row(&self, prefix: &[TokenId]) -> Option<&Distribution> {
        self.exact
            .get(prefix)
            .or_else(|| self.positional.get(prefix.len().checked_sub(1)?))
    }
}

/// A fully enumerated toy world: a finite set of sources with a prior and
/// explicit conditional tables. The marginal is the prior-weighted mixture
/// `sum_x p(x) p(y | prefix, x)`.
#[derive(Debug)]
pub struct TableWorld {
    vocab: Vocabulary,
    sources: Vec<Sequence>,
    prior: Vec<f64>,
    tables: Vec<SourceTable>,
    index: HashMap<Sequence, usize>,
    exact_prefixes: HashSet<Vec<TokenId>>,
    // Marginals for prefixes with no exact rows depend only on length.
    by_length: Mutex<HashMap<usize, Distribution>>,
}

impl Clone for TableWorld {
    fn clone(&self) -> Self {
        TableWorld::new(
            self.vocab.clone(),
            self.sources
                .iter()
                .cloned()
                .zip(self.prior.iter().copied())
                .zip(self.tables.iter().cloned())
                .map(|((s, p), t)| (s, p, t))
                .collect(),
        )
        .expect("cloning a valid world")
    }
}

impl TableWorld {
    pub fn new(vocab: Vocabulary, entries: Vec<(Sequence, f64, SourceTable)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidModel("table world has no sources".into()));
        }
        let mut sources = Vec::with_capacity(entries.len());
        let mut prior = Vec::with_capacity(entries.len());
        let mut tables = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        let mut exact_prefixes = HashSet::new();
        for (i, (src, p, table)) in entries.into_iter().enumerate() {
            src.check_prefix(&vocab)?;
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::InvalidModel(format!("prior {p} for source {i}")));
            }
            if index.insert(src.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate source {:?}", src.ids())));
            }
            for (prefix, row) in &table.exact {
                Sequence::new(prefix.clone()).check_prefix(&vocab)?;
                check_row(&vocab, row)?;
                exact_prefixes.insert(prefix.clone());
            }
            for row in &table.positional {
                check_row(&vocab, row)?;
            }
            sources.push(src);
            prior.push(p);
            tables.push(table);
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!("prior sums to {total}")));
        }
        Ok(TableWorld {
            vocab,
            sources,
            prior,
            tables,
            index,
            exact_prefixes,
            by_length: Mutex::new(HashMap::new()),
        })
    }

    pub fn sources(&self) -> &[Sequence] {
        &self.sources
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn table(&self, source: usize) -> &SourceTable {
        &self.tables[source]
    }

    pub fn source_index(&self, source: &Sequence) -> Result<usize> {
        self.index
            .get(source)
            .copied()
            .ok_or_else(|| Error::UnknownSource(source.ids().to_vec()))
    }

    /// Conditional row for source number `source`.
    pub fn row(&self, source: usize, prefix: &Sequence) -> Result<&Distribution> {
        self.tables[source]
            .row(prefix.ids())
            .ok_or_else(|| Error::UncoveredPrefix(prefix.ids().to_vec()))
    }

    /// `sum_x p(x) p(. | prefix, x)` over sources with non-zero prior.
    pub fn exact_marginal_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        prefix.check_prefix(&self.vocab)?;
        let positional = !self.exact_prefixes.contains(prefix.ids());
        if positional {
            if let Some(d) = self.by_length.lock().unwrap().get(&prefix.len()) {
                return Ok(d.clone());
            }
        }
        let mut mix = vec![0.0; self.vocab.len()];
        for (x, &p) in self.prior.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let row = self.row(x, prefix)?;
            for (m, lp) in mix.iter_mut().zip(row.log_probs()) {
                *m += p * lp.exp();
            }
        }
        let d = Distribution::from_weights(&mix)?;
        if positional {
            self.by_length
                .lock()
                .unwrap()
                .insert(prefix.len(), d.clone());
        }
        Ok(d)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_repr())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_repr(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, &self.to_repr())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_repr(serde_json::from_reader(file)?)
    }

    fn to_repr(&self) -> WorldRepr {
        let sources = self
            .sources
            .iter()
            .zip(&self.prior)
            .zip(&self.tables)
            .map(|((s, &prior), t)| {
                let mut rows: Vec<RowRepr> = t
                    .exact
                    .iter()
                    .map(|(prefix, d)| RowRepr {
                        prefix: prefix.clone(),
                        log_probs: encode_row(d),
                    })
                    .collect();
                rows.sort_by(|a, b| a.prefix.cmp(&b.prefix));
                SourceRepr {
                    source: s.ids().to_vec(),
                    prior,
                    rows,
                    positional: t.positional.iter().map(encode_row).collect(),
                }
            })
            .collect();
        WorldRepr {
            vocab: self.vocab.clone(),
            sources,
        }
    }

    fn from_repr(repr: WorldRepr) -> Result<Self> {
        let mut entries = Vec::with_capacity(repr.sources.len());
        for s in repr.sources {
            let mut table = SourceTable::default();
            for r in s.rows {
                table.exact.insert(r.prefix, decode_row(r.log_probs)?);
            }
            for r in s.positional {
                table.positional.push(decode_row(r)?);
            }
            entries.push((Sequence::new(s.source), s.prior, table));
        }
        TableWorld::new(repr.vocab, entries)
    }
}

fn check_row(vocab: &Vocabulary, row: &Distribution) -> Result<()> {
    if row.len() != vocab.len() {
        return Err(Error::VocabMismatch(format!(
            "table row has {} entries for a vocabulary of {}",
            row.len(),
            vocab.len()
        )));
    }
    Ok(())
}

// JSON has no -inf; zero-probability entries are written as null.
fn encode_row(d: &Distribution) -> Vec<Option<f64>> {
    d.log_probs()
        .iter()
        .map(|&x| x.is_finite().then_some(x))
        .collect()
}

fn decode_row(row: Vec<Option<f64>>) -> Result<Distribution> {
    Distribution::from_log_probs(
        row.into_iter()
            .map(|x| x.unwrap_or(f64::NEG_INFINITY))
            .collect(),
    )
}

#[derive(Serialize, Deserialize)]
struct WorldRepr {
    vocab: Vocabulary,
    sources: Vec<SourceRepr>,
}

#[derive(Serialize, Deserialize)]
struct SourceRepr {
    source: Vec<TokenId>,
    prior: f64,
    #[serde(default)]
    rows: Vec<RowRepr>,
    #[serde(default)]
    positional: Vec<Vec<Option<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct RowRepr {
    prefix: Vec<TokenId>,
    log_probs: Vec<Option<f64>>,
}

impl LanguageModel for TableWorld {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
}

impl ConditionalModel for TableWorld {
    fn cond_dist(&self, source: &Sequence, prefix: &Sequence) -> Result<Distribution> {
        let x = self.source_index(source)?;
        self.row(x, prefix).cloned()
    }
}

impl MarginalModel for TableWorld {
    fn marginal_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        self.exact_marginal_dist(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_source_world(prior: [f64; 2]) -> TableWorld {
        // vocab: bos eos a b; rows put mass on a/b only
        let vocab = Vocabulary::with_words(["a", "b"]).unwrap();
        let row = |pa: f64| Distribution::from_weights(&[0.0, 0.0, pa, 1.0 - pa]).unwrap();
        let t1 = SourceTable {
            positional: vec![row(0.8)],
            ..Default::default()
        };
        let t2 = SourceTable {
            positional: vec![row(0.2)],
            ..Default::default()
        };
        TableWorld::new(
            vocab,
            vec![
                (Sequence::new(vec![0, 2]), prior[0], t1),
                (Sequence::new(vec![0, 3]), prior[1], t2),
            ],
        )
        .unwrap()
    }

    #[test]
    fn symmetric_marginal() {
        let w = two_source_world([0.5, 0.5]);
        let m = w.exact_marginal_dist(&Sequence::new(vec![0])).unwrap();
        assert!((m.prob(2) - 0.5).abs() < 1e-12);
        assert!((m.prob(3) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_marginal() {
        // 0.75 * 0.8 + 0.25 * 0.2 = 0.65
        let w = two_source_world([0.75, 0.25]);
        let m = w.exact_marginal_dist(&Sequence::new(vec![0])).unwrap();
        assert!((m.prob(2) - 0.65).abs() < 1e-12);
        assert!((m.prob(3) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn single_source_marginal_is_its_row() {
        let vocab = Vocabulary::with_words(["a", "b"]).unwrap();
        let row = Distribution::from_weights(&[0.0, 0.1, 0.6, 0.3]).unwrap();
        let t = SourceTable {
            positional: vec![row.clone()],
            ..Default::default()
        };
        let w = TableWorld::new(vocab, vec![(Sequence::new(vec![0]), 1.0, t)]).unwrap();
        let m = w.exact_marginal_dist(&Sequence::new(vec![0])).unwrap();
        for id in 0..4 {
            assert!((m.prob(id) - row.prob(id)).abs() < 1e-12);
        }
    }

    #[test]
    fn uncovered_prefix_and_unknown_source() {
        let w = two_source_world([0.5, 0.5]);
        assert!(matches!(
            w.exact_marginal_dist(&Sequence::new(vec![0, 2])),
            Err(Error::UncoveredPrefix(_))
        ));
        assert!(matches!(
            w.cond_dist(&Sequence::new(vec![0, 2, 2]), &Sequence::new(vec![0])),
            Err(Error::UnknownSource(_))
        ));
    }

    #[test]
    fn exact_rows_take_precedence() {
        let vocab = Vocabulary::with_words(["a", "b"]).unwrap();
        let mut t = SourceTable {
            positional: vec![Distribution::uniform(4), Distribution::uniform(4)],
            ..Default::default()
        };
        t.exact.insert(vec![0, 2], Distribution::one_hot(4, 1));
        let w = TableWorld::new(vocab, vec![(Sequence::new(vec![0]), 1.0, t)]).unwrap();
        let src = Sequence::new(vec![0]);
        assert_eq!(w.cond_dist(&src, &Sequence::new(vec![0, 2])).unwrap().prob(1), 1.0);
        assert_eq!(w.cond_dist(&src, &Sequence::new(vec![0, 3])).unwrap().prob(1), 0.25);
        // the two prefixes share a length but not a marginal
        let m1 = w.exact_marginal_dist(&Sequence::new(vec![0, 3])).unwrap();
        let m2 = w.exact_marginal_dist(&Sequence::new(vec![0, 2])).unwrap();
        assert_ne!(m1, m2);
    }

    #[test]
    fn prior_must_sum_to_one() {
        let vocab = Vocabulary::with_words(["a"]).unwrap();
        let t = SourceTable::default();
        assert!(TableWorld::new(vocab, vec![(Sequence::new(vec![0]), 0.9, t)]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let vocab = Vocabulary::with_words(["a", "b"]).unwrap();
        let mut t = SourceTable {
            positional: vec![Distribution::from_weights(&[0.0, 0.3, 0.3, 0.4]).unwrap()],
            ..Default::default()
        };
        t.exact.insert(vec![0, 3], Distribution::one_hot(4, 1));
        let w = TableWorld::new(vocab, vec![(Sequence::new(vec![0]), 1.0, t)]).unwrap();
        let back = TableWorld::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(back.table(0), w.table(0));
        assert_eq!(back.to_json().unwrap(), w.to_json().unwrap());
    }
}
