//! (λ, τ) grid search.
//!
//! Each trial decodes the tuning corpus with CPMI(λ, τ) and scores its
//! labeled references. The objective rewards ROUGE-L of the decodes and
//! penalizes the mean CPMI score of initial hallucinated reference tokens,
//! each min-max scaled over the sweep and weighted 3:1 by default.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TokenLabel};
use crate::decoder::{beam_search, with_workers};
use crate::error::{Error, Result};
use crate::eval::stats::{KahanSum, MeanStat};
use crate::eval::{rouge_l, token_entropies};
use crate::model::{check_same_vocab, ConditionalModel, MarginalModel};
use crate::scoring::{score_sequence, ScoreStrategy};

/// τ axis: explicit values, or `count` draws from
/// `U[mean - sd, mean + sd]` of the corpus's initial-token entropies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauAxis {
    Values(Vec<f64>),
    Sampled { sampled: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub taus: TauAxis,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_weights")]
    pub weights: (f64, f64),
}

fn default_weights() -> (f64, f64) {
    (3.0, 1.0)
}

impl GridSpec {
    pub fn new(lambdas: Vec<f64>, taus: TauAxis) -> Self {
        GridSpec {
            lambdas,
            taus,
            seed: 0,
            weights: default_weights(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: GridSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidGrid("no lambda values".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidGrid(format!("lambda {l} must be finite and >= 0")));
        }
        match &self.taus {
            TauAxis::Values(v) if v.is_empty() => {
                return Err(Error::InvalidGrid("no tau values".into()))
            }
            TauAxis::Values(v) => {
                if let Some(t) = v.iter().find(|t| t.is_nan() || **t < 0.0) {
                    return Err(Error::InvalidGrid(format!("tau {t} must be >= 0")));
                }
            }
            TauAxis::Sampled { sampled: 0 } => {
                return Err(Error::InvalidGrid("sampled tau count is 0".into()))
            }
            TauAxis::Sampled { .. } => {}
        }
        let (wr, wh) = self.weights;
        if !(wr > 0.0 && wh > 0.0 && wr.is_finite() && wh.is_finite()) {
            return Err(Error::InvalidGrid("weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialResult {
    pub lambda: f64,
    pub tau: f64,
    pub rouge_l_mean: f64,
    pub avg_logprob_initial: f64,
    pub objective: f64,
}

/// Sweep-wide extremes of the two raw metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizers {
    pub rouge_min: f64,
    pub rouge_max: f64,
    pub initial_min: f64,
    pub initial_max: f64,
}

impl Normalizers {
    pub fn from_trials(trials: &[TrialResult]) -> Self {
        let fold = |f: fn(&TrialResult) -> f64| {
            trials.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
                (lo.min(x), hi.max(x))
            })
        };
        let (rouge_min, rouge_max) = fold(|t| t.rouge_l_mean);
        let (initial_min, initial_max) = fold(|t| t.avg_logprob_initial);
        Normalizers {
            rouge_min,
            rouge_max,
            initial_min,
            initial_max,
        }
    }
}

/// `w_rouge * norm(rouge) + w_hall * norm(-avg_logprob_initial)`, each
/// term scaled to [0, 1] over the sweep; a flat axis contributes 0.
pub fn tuning_objective(
    rouge_l_mean: f64,
    avg_logprob_initial: f64,
    weights: (f64, f64),
    n: &Normalizers,
) -> f64 {
    let rouge = if n.rouge_max > n.rouge_min {
        (rouge_l_mean - n.rouge_min) / (n.rouge_max - n.rouge_min)
    } else {
        0.0
    };
    let hall = if n.initial_max > n.initial_min {
        (n.initial_max - avg_logprob_initial) / (n.initial_max - n.initial_min)
    } else {
        0.0
    };
    weights.0 * rouge + weights.1 * hall
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub best_lambda: f64,
    pub best_tau: f64,
    /// Grid order: λ outer, τ inner.
    pub trials: Vec<TrialResult>,
}

impl TuneOutcome {
    pub fn best(&self) -> &TrialResult {
        self.trials
            .iter()
            .find(|t| t.lambda == self.best_lambda && t.tau == self.best_tau)
            .expect("best trial is in the sweep")
    }
}

/// A sweep that stopped at a failing trial. `completed` holds the trials
/// that did finish, with objectives normalized over just those.
#[derive(Debug)]
pub struct TuneFailure {
    pub completed: Vec<TrialResult>,
    pub error: Error,
}

impl std::fmt::Display for TuneFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tuning aborted: {}", self.error)
    }
}

impl std::error::Error for TuneFailure {}

/// Mean and sample standard deviation of the conditional entropy at
/// initial hallucinated reference tokens.
pub fn initial_entropy_stats(corpus: &Corpus, cond: &dyn ConditionalModel) -> Result<MeanStat> {
    let mut values = Vec::new();
    for doc in &corpus.documents {
        for (label, [h]) in token_entropies(doc, cond)? {
            if label == TokenLabel::HallucinatedInitial {
                values.push(h);
            }
        }
    }
    MeanStat::of(&values)
        .ok_or_else(|| Error::InvalidGrid("corpus has no initial hallucinated tokens".into()))
}

/// Resolves the τ axis, drawing sampled values with `seed`. Duplicates are
/// dropped, first occurrence kept.
pub fn resolve_taus(grid: &GridSpec, corpus: &Corpus, cond: &dyn ConditionalModel) -> Result<Vec<f64>> {
    let raw = match &grid.taus {
        TauAxis::Values(v) => v.clone(),
        TauAxis::Sampled { sampled } => {
            let stats = initial_entropy_stats(corpus, cond)?;
            let (mu, sd) = (stats.mean, stats.stddev());
            let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
            (0..*sampled)
                .map(|_| {
                    let t = if sd > 0.0 {
                        rng.gen_range(mu - sd..=mu + sd)
                    } else {
                        mu
                    };
                    t.max(0.0)
                })
                .collect()
        }
    };
    let mut taus: Vec<f64> = Vec::with_capacity(raw.len());
    for t in raw {
        if !taus.contains(&t) {
            taus.push(t);
        }
    }
    Ok(taus)
}

/// Raw metrics for one (λ, τ); `objective` is filled in later.
pub fn run_trial(
    corpus: &Corpus,
    cond: &dyn ConditionalModel,
    marg: &dyn MarginalModel,
    lambda: f64,
    tau: f64,
    k: usize,
    n_max: usize,
) -> Result<TrialResult> {
    let strategy = ScoreStrategy::cpmi(lambda, tau)?;
    let vocab = &corpus.vocabulary;
    let per_doc: Vec<Result<(f64, Vec<f64>)>> = corpus
        .documents
        .par_iter()
        .map(|doc| {
            let decoded = beam_search(strategy, cond, Some(marg), &doc.source, k, n_max)?;
            let f1 = rouge_l(&decoded.best.seq, &doc.reference, vocab).f1;
            let labels = doc.labels_or_err()?;
            let scored = score_sequence(strategy, cond, Some(marg), &doc.source, &doc.reference)?;
            let initial = labels
                .iter()
                .zip(&scored.steps)
                .filter(|(l, _)| **l == TokenLabel::HallucinatedInitial)
                .map(|(_, s)| s.score)
                .collect();
            Ok((f1, initial))
        })
        .collect();
    let mut rouge = KahanSum::default();
    let mut initial = KahanSum::default();
    let mut n_initial = 0usize;
    for r in per_doc {
        let (f1, init) = r?;
        rouge.add(f1);
        for s in init {
            initial.add(s);
            n_initial += 1;
        }
    }
    if n_initial == 0 {
        return Err(Error::InvalidGrid(
            "tuning corpus has no initial hallucinated tokens".into(),
        ));
    }
    Ok(TrialResult {
        lambda,
        tau,
        rouge_l_mean: rouge.total() / corpus.len() as f64,
        avg_logprob_initial: initial.total() / n_initial as f64,
        objective: f64::NAN,
    })
}

fn finish(mut trials: Vec<TrialResult>, weights: (f64, f64)) -> Vec<TrialResult> {
    let norm = Normalizers::from_trials(&trials);
    for t in &mut trials {
        t.objective = tuning_objective(t.rouge_l_mean, t.avg_logprob_initial, weights, &norm);
    }
    trials
}

/// Runs every (λ, τ) trial, then picks the highest objective (ties go to
/// the smaller λ, then the smaller τ).
pub fn grid_search(
    corpus: &Corpus,
    cond: &dyn ConditionalModel,
    marg: &dyn MarginalModel,
    grid: &GridSpec,
    k: usize,
    n_max: usize,
    workers: usize,
) -> std::result::Result<TuneOutcome, TuneFailure> {
    let fail = |error| TuneFailure {
        completed: Vec::new(),
        error,
    };
    grid.validate().map_err(fail)?;
    check_same_vocab(&corpus.vocabulary, cond.vocabulary()).map_err(fail)?;
    check_same_vocab(cond.vocabulary(), marg.vocabulary()).map_err(fail)?;
    if corpus.is_empty() {
        return Err(fail(Error::EmptyCorpus));
    }
    corpus.require_labels().map_err(fail)?;
    let taus = resolve_taus(grid, corpus, cond).map_err(fail)?;

    let mut pairs = Vec::new();
    for &l in &grid.lambdas {
        for &t in &taus {
            if !pairs.contains(&(l, t)) {
                pairs.push((l, t));
            }
        }
    }

    let results: Vec<Result<TrialResult>> = with_workers(workers, || {
        pairs
            .par_iter()
            .map(|&(l, t)| run_trial(corpus, cond, marg, l, t, k, n_max))
            .collect()
    });

    let mut trials = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(t) => trials.push(t),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let trials = finish(trials, grid.weights);
    if let Some(error) = first_error {
        return Err(TuneFailure {
            completed: trials,
            error,
        });
    }

    let best = trials
        .iter()
        .copied()
        .reduce(|best, t| {
            let better = t.objective > best.objective
                || (t.objective == best.objective
                    && (t.lambda, t.tau) < (best.lambda, best.tau));
            if better {
                t
            } else {
                best
            }
        })
        .expect("non-empty grid");
    Ok(TuneOutcome {
        best_lambda: best.lambda,
        best_tau: best.tau,
        trials,
    })
}

/// Heat-map CSV: `lambda,tau,rouge_l,avg_logprob_initial,objective`. A
/// trailing `# invalid: ...` line marks a partial sweep.
pub fn write_heatmap_csv<W: Write>(
    mut out: W,
    trials: &[TrialResult],
    invalid: Option<&str>,
) -> Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["lambda", "tau", "rouge_l", "avg_logprob_initial", "objective"])?;
        for t in trials {
            w.write_record([
                t.lambda.to_string(),
                t.tau.to_string(),
                t.rouge_l_mean.to_string(),
                t.avg_logprob_initial.to_string(),
                t.objective.to_string(),
            ])?;
        }
        w.flush()?;
    }
    if let Some(msg) = invalid {
        writeln!(out, "# invalid: {}", msg.replace('\n', " "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(rouge: f64, init: f64) -> TrialResult {
        TrialResult {
            lambda: 0.0,
            tau: 0.0,
            rouge_l_mean: rouge,
            avg_logprob_initial: init,
            objective: f64::NAN,
        }
    }

    #[test]
    fn objective_extremes() {
        let trials = [trial(0.2, -1.0), trial(0.4, -3.0), trial(0.3, -2.0)];
        let n = Normalizers::from_trials(&trials);
        // best rouge and lowest initial log-prob
        assert_eq!(tuning_objective(0.4, -3.0, (3.0, 1.0), &n), 4.0);
        assert_eq!(tuning_objective(0.2, -1.0, (3.0, 1.0), &n), 0.0);
    }

    #[test]
    fn objective_flat_axes() {
        let trials = [trial(0.3, -2.0), trial(0.3, -2.0)];
        let n = Normalizers::from_trials(&trials);
        assert_eq!(tuning_objective(0.3, -2.0, (3.0, 1.0), &n), 0.0);
    }

    #[test]
    fn objective_mid_range() {
        // rouge normalizes to 0.5, the hallucination term to 0.25
        let n = Normalizers {
            rouge_min: 0.0,
            rouge_max: 1.0,
            initial_min: -4.0,
            initial_max: 0.0,
        };
        assert_eq!(tuning_objective(0.5, -1.0, (3.0, 1.0), &n), 1.75);
    }

    #[test]
    fn grid_validation() {
        let ok = GridSpec::new(vec![0.1], TauAxis::Values(vec![1.0]));
        assert!(ok.validate().is_ok());
        assert!(GridSpec::new(vec![], TauAxis::Values(vec![1.0])).validate().is_err());
        assert!(GridSpec::new(vec![-1.0], TauAxis::Values(vec![1.0])).validate().is_err());
        assert!(GridSpec::new(vec![0.1], TauAxis::Values(vec![])).validate().is_err());
        assert!(GridSpec::new(vec![0.1], TauAxis::Sampled { sampled: 0 }).validate().is_err());
        let mut w = ok.clone();
        w.weights = (0.0, 1.0);
        assert!(w.validate().is_err());
    }

    #[test]
    fn grid_json_forms() {
        let g: GridSpec =
            serde_json::from_str(r#"{"lambdas":[0.1,0.2],"taus":{"sampled":4},"seed":9}"#).unwrap();
        assert_eq!(g.taus, TauAxis::Sampled { sampled: 4 });
        assert_eq!(g.weights, (3.0, 1.0));
        let g: GridSpec =
            serde_json::from_str(r#"{"lambdas":[0.1],"taus":[3.5],"weights":[2,1]}"#).unwrap();
        assert_eq!(g.taus, TauAxis::Values(vec![3.5]));
        assert_eq!(g.seed, 0);
    }

    #[test]
    fn csv_invalid_marker() {
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &[trial(0.5, -1.0)], Some("boom")).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("lambda,tau,rouge_l,avg_logprob_initial,objective\n0,0,0.5,-1,NaN\n"));
        assert!(s.ends_with("# invalid: boom\n"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn objective_monotone(r1 in 0.0f64..1.0, dr in 0.0f64..1.0, a1 in -5.0f64..0.0, da in 0.0f64..5.0) {
                let n = Normalizers { rouge_min: 0.0, rouge_max: 2.0, initial_min: -10.0, initial_max: 0.0 };
                let base = tuning_objective(r1, a1, (3.0, 1.0), &n);
                prop_assert!(tuning_objective(r1 + dr, a1, (3.0, 1.0), &n) >= base);
                prop_assert!(tuning_objective(r1, a1 - da, (3.0, 1.0), &n) >= base);
            }
        }
    }
}
