//! Token-wise score functions.
//!
//! All three strategies share one formula:
//!
//! ```text
//! score(y) = log p(y | prefix, x) - lambda * gate * log p(y | prefix)
//! gate     = H(p(. | prefix, x)) >= tau
//! ```
//!
//! `LogProb` never gates, `Pmi` always gates, `Cpmi` gates on entropy.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::model::{check_same_vocab, ConditionalModel, MarginalModel};
use crate::vocab::{Sequence, TokenId};

/// Tuned optimum for the Transformer-from-scratch summarizer.
pub const TRANS2S_LAMBDA: f64 = 0.13120;
pub const TRANS2S_TAU: f64 = 3.5618;
/// Tuned optimum for the fine-tuned BART summarizer.
pub const BARTS2S_LAMBDA: f64 = 0.65602;
pub const BARTS2S_TAU: f64 = 3.5987;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreStrategy {
    LogProb,
    Pmi { lambda: f64 },
    Cpmi { lambda: f64, tau: f64 },
}

impl ScoreStrategy {
    pub fn pmi(lambda: f64) -> Result<Self> {
        ScoreStrategy::Pmi { lambda }.validated()
    }

    pub fn cpmi(lambda: f64, tau: f64) -> Result<Self> {
        ScoreStrategy::Cpmi { lambda, tau }.validated()
    }

    pub fn trans2s() -> Self {
        ScoreStrategy::Cpmi {
            lambda: TRANS2S_LAMBDA,
            tau: TRANS2S_TAU,
        }
    }

    pub fn barts2s() -> Self {
        ScoreStrategy::Cpmi {
            lambda: BARTS2S_LAMBDA,
            tau: BARTS2S_TAU,
        }
    }

    pub fn validated(self) -> Result<Self> {
        let lambda_ok = |l: f64| l.is_finite() && l >= 0.0;
        match self {
            ScoreStrategy::LogProb => {}
            ScoreStrategy::Pmi { lambda } => {
                if !lambda_ok(lambda) {
                    return Err(Error::InvalidStrategy(format!("lambda {lambda} must be finite and >= 0")));
                }
            }
            ScoreStrategy::Cpmi { lambda, tau } => {
                if !lambda_ok(lambda) {
                    return Err(Error::InvalidStrategy(format!("lambda {lambda} must be finite and >= 0")));
                }
                if tau.is_nan() || tau < 0.0 {
                    return Err(Error::InvalidStrategy(format!("tau {tau} must be >= 0 or +inf")));
                }
            }
        }
        Ok(self)
    }

    pub fn needs_marginal(&self) -> bool {
        !matches!(self, ScoreStrategy::LogProb)
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            ScoreStrategy::LogProb => 0.0,
            ScoreStrategy::Pmi { lambda } | ScoreStrategy::Cpmi { lambda, .. } => lambda,
        }
    }

    /// Whether the marginal penalty applies at a step with this entropy.
    pub fn gate(&self, entropy: f64) -> bool {
        match *self {
            ScoreStrategy::LogProb => false,
            ScoreStrategy::Pmi { .. } => true,
            ScoreStrategy::Cpmi { tau, .. } => entropy >= tau,
        }
    }
}

impl std::fmt::Display for ScoreStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreStrategy::LogProb => write!(f, "logprob"),
            ScoreStrategy::Pmi { lambda } => write!(f, "pmi(lambda={lambda})"),
            ScoreStrategy::Cpmi { lambda, tau } => write!(f, "cpmi(lambda={lambda}, tau={tau})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub token: TokenId,
    pub cond_logp: f64,
    /// Present exactly when the strategy uses a marginal model.
    pub marg_logp: Option<f64>,
    pub entropy: f64,
    pub gate_fired: bool,
    pub score: f64,
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn shannon_entropy(d: &Distribution) -> f64 {
    let h: f64 = d
        .log_probs()
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| -lp.exp() * lp)
        .sum();
    h.clamp(0.0, (d.len() as f64).ln())
}

/// 1-based rank of `y` when ordering by `scores` descending, ties broken by
/// smaller id first.
pub fn rank_by_scores(scores: &[f64], y: TokenId) -> Result<usize> {
    let target = *scores.get(y as usize).ok_or(Error::InvalidToken {
        id: y,
        size: scores.len(),
    })?;
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > target || (s == target && i < y as usize))
        .count();
    Ok(better + 1)
}

pub fn token_rank(d: &Distribution, y: TokenId) -> Result<usize> {
    rank_by_scores(d.log_probs(), y)
}

fn combine(cond_logp: f64, marg_logp: Option<f64>, gate: bool, lambda: f64) -> Result<f64> {
    if cond_logp == f64::NEG_INFINITY || !gate || lambda == 0.0 {
        return Ok(cond_logp);
    }
    let marg = marg_logp.ok_or(Error::MissingMarginal)?;
    if marg == f64::NEG_INFINITY {
        return Err(Error::InvalidDistribution(
            "marginal gives zero probability to a token the conditional allows".into(),
        ));
    }
    Ok(cond_logp - lambda * marg)
}

/// Everything needed to score any token at one decoding step.
#[derive(Debug, Clone)]
pub struct StepContext {
    strategy: ScoreStrategy,
    cond: Distribution,
    marg: Option<Distribution>,
    entropy: f64,
    gate: bool,
}

impl StepContext {
    pub fn new(
        strategy: ScoreStrategy,
        cond: Distribution,
        marg: Option<Distribution>,
    ) -> Result<Self> {
        let marg = if strategy.needs_marginal() {
            let m = marg.ok_or(Error::MissingMarginal)?;
            if m.len() != cond.len() {
                return Err(Error::VocabMismatch(format!(
                    "conditional has {} entries, marginal {}",
                    cond.len(),
                    m.len()
                )));
            }
            Some(m)
        } else {
            None
        };
        let entropy = shannon_entropy(&cond);
        let gate = strategy.gate(entropy);
        Ok(StepContext {
            strategy,
            cond,
            marg,
            entropy,
            gate,
        })
    }

    /// Fetches the distributions for `prefix`; the marginal model is only
    /// consulted when the strategy needs it.
    pub fn from_models(
        strategy: ScoreStrategy,
        cond_model: &dyn ConditionalModel,
        marg_model: Option<&dyn MarginalModel>,
        source: &Sequence,
        prefix: &Sequence,
    ) -> Result<Self> {
        let cond = cond_model.cond_dist(source, prefix)?;
        let marg = if strategy.needs_marginal() {
            Some(
                marg_model
                    .ok_or(Error::MissingMarginal)?
                    .marginal_dist(prefix)?,
            )
        } else {
            None
        };
        StepContext::new(strategy, cond, marg)
    }

    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    pub fn gate_fired(&self) -> bool {
        self.gate
    }

    pub fn cond(&self) -> &Distribution {
        &self.cond
    }

    pub fn marg(&self) -> Option<&Distribution> {
        self.marg.as_ref()
    }

    pub fn vocab_size(&self) -> usize {
        self.cond.len()
    }

    pub fn score(&self, y: TokenId) -> Result<f64> {
        if y as usize >= self.cond.len() {
            return Err(Error::InvalidToken {
                id: y,
                size: self.cond.len(),
            });
        }
        combine(
            self.cond.log_prob(y),
            self.marg.as_ref().map(|m| m.log_prob(y)),
            self.gate,
            self.strategy.lambda(),
        )
    }

    pub fn step(&self, y: TokenId) -> Result<StepScore> {
        Ok(StepScore {
            token: y,
            cond_logp: self.cond.log_prob(y),
            marg_logp: self.marg.as_ref().map(|m| m.log_prob(y)),
            entropy: self.entropy,
            gate_fired: self.gate,
            score: self.score(y)?,
        })
    }

    /// Scores of every token in id order.
    pub fn all_scores(&self) -> Result<Vec<f64>> {
        (0..self.cond.len() as TokenId).map(|y| self.score(y)).collect()
    }
}

/// Scores token `y` given the step's conditional and (for PMI/CPMI)
/// marginal distribution.
pub fn step_score(
    strategy: ScoreStrategy,
    cond: &Distribution,
    marg: Option<&Distribution>,
    y: TokenId,
) -> Result<StepScore> {
    StepContext::new(strategy, cond.clone(), marg.cloned())?.step(y)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredSequence {
    pub steps: Vec<StepScore>,
    pub total: f64,
}

/// Scores every token after BOS of the complete sequence `y`, EOS
/// included.
pub fn score_sequence(
    strategy: ScoreStrategy,
    cond_model: &dyn ConditionalModel,
    marg_model: Option<&dyn MarginalModel>,
    source: &Sequence,
    y: &Sequence,
) -> Result<ScoredSequence> {
    let vocab = cond_model.vocabulary();
    if strategy.needs_marginal() {
        let m = marg_model.ok_or(Error::MissingMarginal)?;
        check_same_vocab(vocab, m.vocabulary())?;
    }
    y.check_complete(vocab)?;
    let mut steps = Vec::with_capacity(y.len() - 1);
    let mut total = 0.0;
    for t in 1..y.len() {
        let prefix = Sequence::new(y.ids()[..t].to_vec());
        let ctx = StepContext::from_models(strategy, cond_model, marg_model, source, &prefix)?;
        let step = ctx.step(y.ids()[t])?;
        total += step.score;
        steps.push(step);
    }
    Ok(ScoredSequence { steps, total })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub doc_id: String,
    pub t: usize,
    pub token: TokenId,
    pub cond_logp: f64,
    pub marg_logp: Option<f64>,
    pub entropy: f64,
    pub gate_fired: bool,
    pub score: f64,
}

pub fn trace_records(doc_id: &str, steps: &[StepScore]) -> Vec<TraceRecord> {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| TraceRecord {
            doc_id: doc_id.to_string(),
            t: i + 1,
            token: s.token,
            cond_logp: s.cond_logp,
            marg_logp: s.marg_logp,
            entropy: s.entropy,
            gate_fired: s.gate_fired,
            score: s.score,
        })
        .collect()
}

/// One JSON object per step; `t` counts from 1 (the token after BOS).
pub fn write_trace_jsonl<W: Write>(mut out: W, doc_id: &str, steps: &[StepScore]) -> Result<()> {
    for rec in trace_records(doc_id, steps) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
