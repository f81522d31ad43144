//! Beam search over token-wise additive scores, an exhaustive reference
//! search for small instances, and document-parallel corpus decoding.
//!
//! Ordering is always score descending, then id sequence ascending.
//! Finished hypotheses stay in the beam and keep competing but are never
//! extended; BOS is never proposed as a continuation. Survivors that are
//! still open after `n_max` rounds get an EOS step scored like any other.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{check_same_vocab, ConditionalModel, MarginalModel};
use crate::scoring::{ScoreStrategy, StepContext, StepScore};
use crate::vocab::{Sequence, TokenId, Vocabulary};

pub const DEFAULT_BEAM: usize = 5;
/// Upper bound on `|V|^n_max` for [`exhaustive_argmax`].
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    pub seq: Sequence,
    pub score: f64,
    pub trace: Vec<StepScore>,
    pub finished: bool,
}

impl Hypothesis {
    fn root(vocab: &Vocabulary) -> Self {
        Hypothesis {
            seq: Sequence::bos(vocab),
            score: 0.0,
            trace: Vec::new(),
            finished: false,
        }
    }

    fn extend(&self, step: StepScore, eos: TokenId) -> Self {
        let mut trace = Vec::with_capacity(self.trace.len() + 1);
        trace.extend_from_slice(&self.trace);
        let finished = step.token == eos;
        let score = self.score + step.score;
        let seq = self.seq.with(step.token);
        trace.push(step);
        Hypothesis {
            seq,
            score,
            trace,
            finished,
        }
    }

    pub fn gate_fired_count(&self) -> usize {
        self.trace.iter().filter(|s| s.gate_fired).count()
    }

    pub fn max_entropy(&self) -> f64 {
        self.trace.iter().map(|s| s.entropy).fold(0.0, f64::max)
    }
}

/// Search order: higher score first, then lexicographically smaller ids.
pub fn rank_order(a_score: f64, a_seq: &[TokenId], b_score: f64, b_seq: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_seq.cmp(b_seq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecodeStats {
    /// Expansion rounds performed (the forced EOS step is not counted).
    pub steps: usize,
    /// Gated steps along the best hypothesis.
    pub gate_fired_count: usize,
    /// Largest conditional entropy along the best hypothesis.
    pub max_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeResult {
    pub best: Hypothesis,
    pub beam_final: Vec<Hypothesis>,
    pub stats: DecodeStats,
}

fn check_models(
    strategy: ScoreStrategy,
    cond: &dyn ConditionalModel,
    marg: Option<&dyn MarginalModel>,
) -> Result<()> {
    strategy.validated()?;
    if strategy.needs_marginal() {
        let m = marg.ok_or(Error::MissingMarginal)?;
        check_same_vocab(cond.vocabulary(), m.vocabulary())?;
    }
    Ok(())
}

enum Candidate {
    Carry(usize),
    Extend { parent: usize, step: StepScore, score: f64 },
}

/// Width-`k` beam search for at most `n_max` content tokens.
pub fn beam_search(
    strategy: ScoreStrategy,
    cond: &dyn ConditionalModel,
    marg: Option<&dyn MarginalModel>,
    source: &Sequence,
    k: usize,
    n_max: usize,
) -> Result<DecodeResult> {
    if k == 0 {
        return Err(Error::InvalidBeam);
    }
    if n_max == 0 {
        return Err(Error::InvalidMaxLen);
    }
    check_models(strategy, cond, marg)?;
    let vocab = cond.vocabulary();
    let (bos, eos) = (vocab.bos(), vocab.eos());

    let mut beam = vec![Hypothesis::root(vocab)];
    let mut steps = 0;
    while steps < n_max && beam.iter().any(|h| !h.finished) {
        steps += 1;
        let mut candidates = Vec::new();
        for (i, h) in beam.iter().enumerate() {
            if h.finished {
                candidates.push(Candidate::Carry(i));
                continue;
            }
            let ctx = StepContext::from_models(strategy, cond, marg, source, &h.seq)?;
            for y in 0..ctx.vocab_size() as TokenId {
                if y == bos {
                    continue;
                }
                let step = ctx.step(y)?;
                let score = h.score + step.score;
                candidates.push(Candidate::Extend { parent: i, step, score });
            }
        }

        let key = |c: &Candidate| -> (f64, usize, Option<TokenId>) {
            match c {
                Candidate::Carry(i) => (beam[*i].score, *i, None),
                Candidate::Extend { parent, step, score } => (*score, *parent, Some(step.token)),
            }
        };
        candidates.sort_by(|a, b| {
            let (sa, pa, ya) = key(a);
            let (sb, pb, yb) = key(b);
            sb.total_cmp(&sa).then_with(|| {
                let sa = beam[pa].seq.ids().iter().chain(ya.iter());
                let sb = beam[pb].seq.ids().iter().chain(yb.iter());
                sa.cmp(sb)
            })
        });
        candidates.truncate(k);
        beam = candidates
            .into_iter()
            .map(|c| match c {
                Candidate::Carry(i) => beam[i].clone(),
                Candidate::Extend { parent, step, .. } => beam[parent].extend(step, eos),
            })
            .collect();
    }

    for h in beam.iter_mut().filter(|h| !h.finished) {
        let ctx = StepContext::from_models(strategy, cond, marg, source, &h.seq)?;
        *h = h.extend(ctx.step(eos)?, eos);
    }
    beam.sort_by(|a, b| rank_order(a.score, a.seq.ids(), b.score, b.seq.ids()));

    let best = beam[0].clone();
    let stats = DecodeStats {
        steps,
        gate_fired_count: best.gate_fired_count(),
        max_entropy: best.max_entropy(),
    };
    Ok(DecodeResult {
        best,
        beam_final: beam,
        stats,
    })
}

/// Exact maximizer of the additive score over every complete sequence with
/// at most `n_max` content tokens. Only for tiny instances.
pub fn exhaustive_argmax(
    strategy: ScoreStrategy,
    cond: &dyn ConditionalModel,
    marg: Option<&dyn MarginalModel>,
    source: &Sequence,
    n_max: usize,
) -> Result<Hypothesis> {
    let vocab = cond.vocabulary();
    let size = vocab.len();
    let too_large = || Error::InstanceTooLarge { size, n_max };
    let count = u32::try_from(n_max)
        .ok()
        .and_then(|n| (size as u128).checked_pow(n))
        .ok_or_else(too_large)?;
    if count > EXHAUSTIVE_LIMIT {
        return Err(too_large());
    }
    if n_max == 0 {
        return Err(Error::InvalidMaxLen);
    }
    check_models(strategy, cond, marg)?;

    struct Search<'a> {
        strategy: ScoreStrategy,
        cond: &'a dyn ConditionalModel,
        marg: Option<&'a dyn MarginalModel>,
        source: &'a Sequence,
        content: Vec<TokenId>,
        eos: TokenId,
        n_max: usize,
        best: Option<Hypothesis>,
    }

    impl Search<'_> {
        fn offer(&mut self, h: Hypothesis) {
            let better = match &self.best {
                None => true,
                Some(b) => rank_order(h.score, h.seq.ids(), b.score, b.seq.ids()) == Ordering::Less,
            };
            if better {
                self.best = Some(h);
            }
        }

        fn visit(&mut self, h: &Hypothesis, depth: usize) -> Result<()> {
            let ctx =
                StepContext::from_models(self.strategy, self.cond, self.marg, self.source, &h.seq)?;
            self.offer(h.extend(ctx.step(self.eos)?, self.eos));
            if depth < self.n_max {
                for i in 0..self.content.len() {
                    let child = h.extend(ctx.step(self.content[i])?, self.eos);
                    self.visit(&child, depth + 1)?;
                }
            }
            Ok(())
        }
    }

    let mut search = Search {
        strategy,
        cond,
        marg,
        source,
        content: vocab.content_ids().collect(),
        eos: vocab.eos(),
        n_max,
        best: None,
    };
    search.visit(&Hypothesis::root(vocab), 0)?;
    Ok(search.best.expect("at least the empty sequence is scored"))
}

#[derive(Debug)]
pub struct DocumentDecode {
    pub id: String,
    pub result: Result<DecodeResult>,
}

/// Decodes every document's source; output order follows the corpus
/// regardless of `workers`. A failing document does not stop the others.
pub fn decode_corpus(
    strategy: ScoreStrategy,
    cond: &dyn ConditionalModel,
    marg: Option<&dyn MarginalModel>,
    corpus: &Corpus,
    k: usize,
    n_max: usize,
    workers: usize,
) -> Result<Vec<DocumentDecode>> {
    check_same_vocab(&corpus.vocabulary, cond.vocabulary())?;
    check_models(strategy, cond, marg)?;
    if k == 0 {
        return Err(Error::InvalidBeam);
    }
    if n_max == 0 {
        return Err(Error::InvalidMaxLen);
    }
    let run = || {
        corpus
            .documents
            .par_iter()
            .map(|doc| DocumentDecode {
                id: doc.id.clone(),
                result: beam_search(strategy, cond, marg, &doc.source, k, n_max),
            })
            .collect()
    };
    Ok(with_workers(workers, run))
}

/// Runs `f` on a pool of `workers` threads (0 means rayon's default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// One line of decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_fired_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DecodeRecord {
    pub fn new(doc: &DocumentDecode, vocab: &Vocabulary, with_trace: bool) -> Self {
        match &doc.result {
            Ok(r) => DecodeRecord {
                id: doc.id.clone(),
                tokens: Some(r.best.seq.ids().to_vec()),
                text: Some(vocab.decode(&r.best.seq)),
                score: Some(r.best.score),
                gate_fired_count: Some(r.stats.gate_fired_count),
                max_entropy: Some(r.stats.max_entropy),
                trace: with_trace.then(|| r.best.trace.clone()),
                error: None,
            },
            Err(e) => DecodeRecord {
                id: doc.id.clone(),
                tokens: None,
                text: None,
                score: None,
                gate_fired_count: None,
                max_entropy: None,
                trace: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Writes one JSON line per document and returns the number of failures.
pub fn write_decode_jsonl<W: std::io::Write>(
    mut out: W,
    results: &[DocumentDecode],
    vocab: &Vocabulary,
    with_trace: bool,
) -> Result<usize> {
    let mut failed = 0;
    for doc in results {
        if doc.result.is_err() {
            failed += 1;
        }
        serde_json::to_writer(&mut out, &DecodeRecord::new(doc, vocab, with_trace))?;
        out.write_all(b"\n")?;
    }
    Ok(failed)
}
