//! Per-label analyses of reference tokens: how CPMI moves scores and ranks,
//! conditional entropy by label, and the label-mean factuality score.

use rayon::prelude::*;
use serde::Serialize;

use super::stats::{KahanSum, MeanStat};
use crate::corpus::{Corpus, LabeledDocument, TokenLabel};
use crate::decoder::with_workers;
use crate::error::{Error, Result};
use crate::model::{check_same_vocab, ConditionalModel, MarginalModel};
use crate::scoring::{rank_by_scores, shannon_entropy, token_rank, ScoreStrategy, StepContext};
use crate::vocab::Sequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    NonHallucinated,
    Hallucinated,
    Initial,
    Subsequent,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::NonHallucinated,
        Category::Hallucinated,
        Category::Initial,
        Category::Subsequent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::NonHallucinated => "non_hallucinated",
            Category::Hallucinated => "hallucinated",
            Category::Initial => "initial",
            Category::Subsequent => "subsequent",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Category::NonHallucinated => "Non-Hallucinated",
            Category::Hallucinated => "Hallucinated",
            Category::Initial => "Initial",
            Category::Subsequent => "Subsequent",
        }
    }

    pub fn contains(self, label: TokenLabel) -> bool {
        match self {
            Category::NonHallucinated => label == TokenLabel::NonHallucinated,
            Category::Hallucinated => label.is_hallucinated(),
            Category::Initial => label == TokenLabel::HallucinatedInitial,
            Category::Subsequent => label == TokenLabel::HallucinatedSubsequent,
        }
    }
}

/// Groups `(label, value)` observations into per-category statistics,
/// skipping empty categories.
fn group<const N: usize>(
    obs: &[(TokenLabel, [f64; N])],
) -> Vec<(Category, [MeanStat; N])> {
    Category::ALL
        .iter()
        .filter_map(|&cat| {
            let mut cols: [Vec<f64>; N] = std::array::from_fn(|_| Vec::new());
            for (label, vals) in obs {
                if cat.contains(*label) {
                    for (c, v) in cols.iter_mut().zip(vals) {
                        c.push(*v);
                    }
                }
            }
            let stats: Option<Vec<MeanStat>> = cols.iter().map(|c| MeanStat::of(c)).collect();
            stats.map(|s| (cat, s.try_into().expect("N columns")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaRow {
    pub category: Category,
    pub delta_score: MeanStat,
    pub delta_rank: MeanStat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaReport {
    pub lambda: f64,
    pub tau: f64,
    pub rows: Vec<DeltaRow>,
}

impl DeltaReport {
    pub fn get(&self, cat: Category) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.category == cat)
    }
}

/// Per reference content token: `(label, [Δscore, Δrank])` of CPMI(λ, τ)
/// relative to plain log-probability.
pub fn token_deltas(
    doc: &LabeledDocument,
    cond: &dyn ConditionalModel,
    marg: &dyn MarginalModel,
    strategy: ScoreStrategy,
) -> Result<Vec<(TokenLabel, [f64; 2])>> {
    let labels = doc.labels_or_err()?;
    let ids = doc.reference.ids();
    let mut out = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let t = i + 1;
        let prefix = Sequence::new(ids[..t].to_vec());
        let y = ids[t];
        let ctx = StepContext::from_models(strategy, cond, Some(marg), &doc.source, &prefix)?;
        let d_score = ctx.score(y)? - ctx.cond().log_prob(y);
        let rank_cpmi = rank_by_scores(&ctx.all_scores()?, y)?;
        let rank_lp = token_rank(ctx.cond(), y)?;
        out.push((label, [d_score, rank_cpmi as f64 - rank_lp as f64]));
    }
    Ok(out)
}

/// How reference-token scores and ranks change under CPMI(λ, τ), by
/// hallucination label.
pub fn delta_by_label(
    corpus: &Corpus,
    cond: &dyn ConditionalModel,
    marg: &dyn MarginalModel,
    lambda: f64,
    tau: f64,
    workers: usize,
) -> Result<DeltaReport> {
    let strategy = ScoreStrategy::cpmi(lambda, tau)?;
    check_same_vocab(&corpus.vocabulary, cond.vocabulary())?;
    check_same_vocab(cond.vocabulary(), marg.vocabulary())?;
    corpus.require_labels()?;
    let per_doc: Vec<Result<Vec<_>>> = with_workers(workers, || {
        corpus
            .documents
            .par_iter()
            .map(|d| token_deltas(d, cond, marg, strategy))
            .collect()
    });
    let mut obs = Vec::new();
    for r in per_doc {
        obs.extend(r?);
    }
    let rows = group(&obs)
        .into_iter()
        .map(|(category, [delta_score, delta_rank])| DeltaRow {
            category,
            delta_score,
            delta_rank,
        })
        .collect();
    Ok(DeltaReport { lambda, tau, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyRow {
    pub category: Category,
    pub entropy: MeanStat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub rows: Vec<EntropyRow>,
}

impl EntropyReport {
    pub fn get(&self, cat: Category) -> Option<&MeanStat> {
        self.rows
            .iter()
            .find(|r| r.category == cat)
            .map(|r| &r.entropy)
    }
}

/// `(label, entropy)` of the conditional distribution before each reference
/// content token.
pub fn token_entropies(
    doc: &LabeledDocument,
    cond: &dyn ConditionalModel,
) -> Result<Vec<(TokenLabel, [f64; 1])>> {
    let labels = doc.labels_or_err()?;
    let ids = doc.reference.ids();
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let prefix = Sequence::new(ids[..i + 1].to_vec());
            let d = cond.cond_dist(&doc.source, &prefix)?;
            Ok((label, [shannon_entropy(&d)]))
        })
        .collect()
}

pub fn entropy_by_label(
    corpus: &Corpus,
    cond: &dyn ConditionalModel,
    workers: usize,
) -> Result<EntropyReport> {
    check_same_vocab(&corpus.vocabulary, cond.vocabulary())?;
    corpus.require_labels()?;
    let per_doc: Vec<Result<Vec<_>>> = with_workers(workers, || {
        corpus
            .documents
            .par_iter()
            .map(|d| token_entropies(d, cond))
            .collect()
    });
    let mut obs = Vec::new();
    for r in per_doc {
        obs.extend(r?);
    }
    Ok(EntropyReport {
        rows: group(&obs)
            .into_iter()
            .map(|(category, [entropy])| EntropyRow { category, entropy })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Mean of per-document fractions.
    #[default]
    Macro,
    /// Fraction over all tokens pooled.
    Micro,
}

/// Mean fraction of non-hallucinated tokens. Documents without content
/// tokens are skipped.
pub fn factscore_mean<'a, I>(labels: I, averaging: Averaging) -> Result<f64>
where
    I: IntoIterator<Item = &'a [TokenLabel]>,
{
    let mut fractions = KahanSum::default();
    let mut docs = 0usize;
    let (mut faithful, mut total) = (0usize, 0usize);
    for doc in labels {
        if doc.is_empty() {
            continue;
        }
        let n = doc.iter().filter(|l| !l.is_hallucinated()).count();
        fractions.add(n as f64 / doc.len() as f64);
        docs += 1;
        faithful += n;
        total += doc.len();
    }
    if docs == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(match averaging {
        Averaging::Macro => fractions.total() / docs as f64,
        Averaging::Micro => faithful as f64 / total as f64,
    })
}

pub fn corpus_factscore(corpus: &Corpus, averaging: Averaging) -> Result<f64> {
    let labels: Vec<&[TokenLabel]> = corpus
        .documents
        .iter()
        .map(|d| d.labels_or_err())
        .collect::<Result<_>>()?;
    factscore_mean(labels, averaging)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenLabel::*;

    #[test]
    fn factscore_examples() {
        let all_n = [NonHallucinated; 3];
        assert_eq!(factscore_mean([&all_n[..]], Averaging::Macro).unwrap(), 1.0);
        let mixed = [NonHallucinated, HallucinatedInitial, HallucinatedSubsequent, NonHallucinated];
        assert_eq!(factscore_mean([&mixed[..]], Averaging::Macro).unwrap(), 0.5);
        assert_eq!(
            factscore_mean([&all_n[..], &mixed[..]], Averaging::Macro).unwrap(),
            0.75
        );
        // pooled: 5 of 7
        assert_eq!(
            factscore_mean([&all_n[..], &mixed[..]], Averaging::Micro).unwrap(),
            5.0 / 7.0
        );
        assert!(factscore_mean([&[][..]], Averaging::Macro).is_err());
    }

    #[test]
    fn grouping_counts() {
        let obs = vec![
            (NonHallucinated, [1.0]),
            (HallucinatedInitial, [2.0]),
            (HallucinatedSubsequent, [4.0]),
            (HallucinatedInitial, [6.0]),
        ];
        let g = group(&obs);
        let get = |c| g.iter().find(|(cat, _)| *cat == c).unwrap().1[0];
        assert_eq!(get(Category::Hallucinated).count, 3);
        assert_eq!(get(Category::Hallucinated).mean, 4.0);
        assert_eq!(get(Category::Initial).mean, 4.0);
        assert_eq!(get(Category::NonHallucinated).count, 1);

        let only_n = group(&[(NonHallucinated, [0.5])]);
        assert_eq!(only_n.len(), 1);
        assert_eq!(only_n[0].0, Category::NonHallucinated);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn label() -> impl Strategy<Value = TokenLabel> {
            prop_oneof![
                Just(NonHallucinated),
                Just(HallucinatedInitial),
                Just(HallucinatedSubsequent)
            ]
        }

        proptest! {
            #[test]
            fn factscore_ignores_order(docs in proptest::collection::vec(proptest::collection::vec(label(), 1..6), 1..6)) {
                let fwd = factscore_mean(docs.iter().map(|d| d.as_slice()), Averaging::Macro).unwrap();
                let rev = factscore_mean(docs.iter().rev().map(|d| d.as_slice()), Averaging::Macro).unwrap();
                prop_assert!((fwd - rev).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&fwd));
            }
        }
    }
}
