//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every criterion runs even if an earlier one fails; the test fails at the
//! end if any did. Oracles here are written independently of the library
//! (brute-force sums, subsequence enumeration, explicit enumeration).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use cpmi_core::corpus::TokenLabel;
use cpmi_core::decoder::{beam_search, decode_corpus, exhaustive_argmax, DEFAULT_BEAM};
use cpmi_core::dist::Distribution;
use cpmi_core::eval::{delta_by_label, rouge_l, rouge_l_tokens, Category};
use cpmi_core::model::{ConditionalModel, LanguageModel, TableWorld};
use cpmi_core::scoring::{score_sequence, shannon_entropy, ScoreStrategy, StepScore};
use cpmi_core::synth::{hallucination_benchmark, random_table_world, BenchmarkConfig, HallucinationBenchmark};
use cpmi_core::tuner::{grid_search, write_heatmap_csv, GridSpec, TauAxis};
use cpmi_core::vocab::{Sequence, TokenId, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let e = start.elapsed();
    if e > limit {
        Err(format!("{what} took {e:.2?}, limit {limit:?}"))
    } else {
        Ok(e)
    }
}

/// Worlds of 3..=5 tokens (BOS and EOS included) and horizons 1..=4.
fn world_params(i: u64) -> (usize, usize, usize) {
    let v = 3 + (i % 3) as usize;
    let n_max = 1 + ((i / 3) % 4) as usize;
    let n_sources = 1 + (i % 4) as usize;
    (v, n_max, n_sources)
}

fn random_cpmi<R: Rng>(rng: &mut R, v: usize) -> (f64, f64) {
    (rng.gen_range(0.05..1.5), rng.gen_range(0.0..(v as f64).ln()))
}

fn same_steps_ignoring_marginal(a: &[StepScore], b: &[StepScore]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.token == y.token && x.cond_logp == y.cond_logp && x.score == y.score && x.entropy == y.entropy
        })
}

fn degeneracy() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut decodes = 0;
    for i in 0..120u64 {
        let (v, n_max, n_src) = world_params(i);
        let w = random_table_world(1000 + i, v, n_max, n_src);
        let (lambda, tau) = random_cpmi(&mut rng, v);
        for src in w.sources() {
            let run = |s: ScoreStrategy| {
                beam_search(s, &w, Some(&w), src, DEFAULT_BEAM, n_max).map_err(|e| format!("world {i}: {e}"))
            };
            let lp = run(ScoreStrategy::LogProb)?;
            let zero_lambda = run(ScoreStrategy::cpmi(0.0, tau).unwrap())?;
            let inf_tau = run(ScoreStrategy::cpmi(lambda, f64::INFINITY).unwrap())?;
            for (name, other) in [("λ=0", &zero_lambda), ("τ=∞", &inf_tau)] {
                ensure!(other.best.seq == lp.best.seq, "world {i}: CPMI({name}) chose a different sequence");
                ensure!(other.best.score == lp.best.score, "world {i}: CPMI({name}) total differs");
                ensure!(
                    same_steps_ignoring_marginal(&other.best.trace, &lp.best.trace),
                    "world {i}: CPMI({name}) trace differs"
                );
                ensure!(other.beam_final.len() == lp.beam_final.len(), "world {i}: beam sizes differ");
            }
            let pmi = run(ScoreStrategy::pmi(lambda).unwrap())?;
            let zero_tau = run(ScoreStrategy::cpmi(lambda, 0.0).unwrap())?;
            ensure!(pmi.best == zero_tau.best, "world {i}: CPMI(τ=0) differs from PMI");
            ensure!(pmi.beam_final == zero_tau.beam_final, "world {i}: CPMI(τ=0) beam differs from PMI");
            decodes += 5;
        }
    }
    let e = within(start, Duration::from_secs(10), "degeneracy")?;
    Ok(format!("120 worlds, {decodes} decodes, {e:.2?}"))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut checks = 0;
    for i in 0..60u64 {
        let (v, n_max, n_src) = world_params(i);
        let w = random_table_world(5000 + i, v, n_max, n_src);
        let k = v.pow(n_max as u32);
        let (lambda, tau) = random_cpmi(&mut rng, v);
        let strategies = [
            ScoreStrategy::LogProb,
            ScoreStrategy::pmi(lambda).unwrap(),
            ScoreStrategy::cpmi(lambda, tau).unwrap(),
        ];
        for src in w.sources() {
            for s in strategies {
                let beam = beam_search(s, &w, Some(&w), src, k, n_max).map_err(|e| e.to_string())?;
                let exact = exhaustive_argmax(s, &w, Some(&w), src, n_max).map_err(|e| e.to_string())?;
                ensure!(
                    beam.best.seq == exact.seq,
                    "world {i} {s}: beam {:?} vs exhaustive {:?}",
                    beam.best.seq,
                    exact.seq
                );
                ensure!(
                    beam.best.score == exact.score || (beam.best.score - exact.score).abs() <= 1e-9,
                    "world {i} {s}: totals {} vs {}",
                    beam.best.score,
                    exact.score
                );
                checks += 1;
            }
        }
    }
    let e = within(start, Duration::from_secs(30), "oracle equivalence")?;
    Ok(format!("60 worlds, {checks} (source, strategy) pairs, {e:.2?}"))
}

/// Entropy computed directly from probabilities, no clamping.
fn entropy_oracle(d: &Distribution) -> f64 {
    d.probs().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

fn entropy_checks() -> Outcome {
    for n in 2..=64usize {
        let h = shannon_entropy(&Distribution::uniform(n));
        ensure!((h - (n as f64).ln()).abs() <= 1e-9, "uniform({n}) entropy {h}");
        let one = Distribution::one_hot(n, (n - 1) as TokenId);
        ensure!(shannon_entropy(&one) == 0.0, "one-hot({n}) entropy non-zero");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut seen = 0;
    for i in 0..40u64 {
        let (v, n_max, n_src) = world_params(i);
        let w = random_table_world(9000 + i, v, n_max, n_src);
        let (lambda, tau) = random_cpmi(&mut rng, v);
        for src in w.sources() {
            for s in [ScoreStrategy::LogProb, ScoreStrategy::cpmi(lambda, tau).unwrap()] {
                let r = beam_search(s, &w, Some(&w), src, DEFAULT_BEAM, n_max).map_err(|e| e.to_string())?;
                for h in &r.beam_final {
                    let mut prefix = Sequence::new(vec![w.vocabulary().bos()]);
                    for step in &h.trace {
                        let row = w.cond_dist(src, &prefix).map_err(|e| e.to_string())?;
                        let oracle = entropy_oracle(&row);
                        ensure!(
                            (step.entropy - oracle).abs() <= 1e-12,
                            "trace entropy {} vs oracle {oracle}",
                            step.entropy
                        );
                        ensure!(
                            step.entropy >= 0.0 && step.entropy <= (v as f64).ln(),
                            "entropy {} outside [0, ln {v}]",
                            step.entropy
                        );
                        prefix.push(step.token);
                        seen += 1;
                    }
                }
            }
        }
    }
    Ok(format!("uniform/one-hot for |V| = 2..64; {seen} decoding steps within bounds"))
}

/// `sum_x p(x) p(. | prefix, x)`, straight from the stored rows.
fn brute_marginal(w: &TableWorld, prefix: &Sequence) -> Vec<f64> {
    let mut out = vec![0.0; w.vocabulary().len()];
    for (x, src) in w.sources().iter().enumerate() {
        let row = w.cond_dist(src, prefix).unwrap();
        for (o, p) in out.iter_mut().zip(row.probs()) {
            *o += w.prior()[x] * p;
        }
    }
    out
}

fn marginal_bayes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut rows, mut seqs) = (0, 0);
    for i in 0..50u64 {
        let (v, n_max, n_src) = world_params(i);
        let w = random_table_world(7000 + i, v, n_max, n_src.max(2));
        for prefix in w.table(0).exact.keys() {
            let prefix = Sequence::new(prefix.clone());
            let lib = w.exact_marginal_dist(&prefix).map_err(|e| e.to_string())?;
            let oracle = brute_marginal(&w, &prefix);
            for (a, b) in lib.probs().iter().zip(&oracle) {
                ensure!((a - b).abs() <= 1e-9, "world {i} prefix {prefix:?}: {a} vs {b}");
            }
            rows += 1;
        }
        // sample complete sequences the model can produce and check PMI totals
        for src in w.sources() {
            let lambda = rng.gen_range(0.05..1.5);
            let Some(ids) = (0..20).find_map(|_| sample_complete(&mut rng, &w, src, n_max)) else {
                continue;
            };
            let seq = Sequence::new(ids.clone());
            let mut log_cond = 0.0;
            let mut log_marg = 0.0;
            for t in 1..ids.len() {
                let prefix = Sequence::new(ids[..t].to_vec());
                log_cond += w.cond_dist(src, &prefix).unwrap().prob(ids[t]).ln();
                log_marg += brute_marginal(&w, &prefix)[ids[t] as usize].ln();
            }
            let expected = log_cond - lambda * log_marg;
            let pmi = score_sequence(ScoreStrategy::pmi(lambda).unwrap(), &w, Some(&w), src, &seq)
                .map_err(|e| e.to_string())?;
            ensure!(
                (pmi.total - expected).abs() <= 1e-9,
                "world {i}: PMI total {} vs {expected}",
                pmi.total
            );
            seqs += 1;
        }
    }
    Ok(format!("{rows} marginal rows and {seqs} PMI totals within 1e-9"))
}

/// Samples a complete sequence with non-zero probability, or `None` when
/// the walk reaches the horizon where EOS has zero mass.
fn sample_complete<R: Rng>(rng: &mut R, w: &TableWorld, src: &Sequence, n_max: usize) -> Option<Vec<TokenId>> {
    let eos = w.vocabulary().eos();
    let mut ids = vec![w.vocabulary().bos()];
    loop {
        let row = w.cond_dist(src, &Sequence::new(ids.clone())).unwrap();
        let y = if ids.len() - 1 == n_max {
            (row.prob(eos) > 0.0).then_some(eos)?
        } else {
            sample(rng, &row.probs())
        };
        ids.push(y);
        if y == eos {
            return Some(ids);
        }
    }
}

fn sample<R: Rng>(rng: &mut R, probs: &[f64]) -> TokenId {
    let mut u = rng.gen::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        if u < p && p > 0.0 {
            return i as TokenId;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).expect("row has mass") as TokenId
}

/// Fraction of designated steps where `outputs` emitted the distractor.
fn distractor_rate(b: &HallucinationBenchmark, outputs: &[Sequence]) -> f64 {
    let hits = b
        .designated
        .iter()
        .filter(|d| outputs[d.doc].ids().get(d.position + 1) == Some(&d.distractor))
        .count();
    hits as f64 / b.designated.len() as f64
}

fn decode_all(b: &HallucinationBenchmark, s: ScoreStrategy, n_max: usize) -> Result<Vec<Sequence>, String> {
    decode_corpus(s, &b.world, Some(&b.world), &b.corpus, DEFAULT_BEAM, n_max, 0)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|d| d.result.map(|r| r.best.seq).map_err(|e| format!("{}: {e}", d.id)))
        .collect()
}

fn mean_rouge(b: &HallucinationBenchmark, outputs: &[Sequence]) -> f64 {
    let v = &b.corpus.vocabulary;
    let total: f64 = outputs
        .iter()
        .zip(&b.corpus.documents)
        .map(|(o, d)| rouge_l(o, &d.reference, v).f1)
        .sum();
    total / outputs.len() as f64
}

const BENCH_N_MAX: usize = 12;

fn benchmark_grid() -> GridSpec {
    GridSpec::new(
        vec![0.0, 0.1, 0.2, 0.3, 0.5, 1.0],
        TauAxis::Values(vec![1.0, 2.0, 3.0, 4.0]),
    )
}

/// Checks the fixture's defining properties against brute-force sums.
fn verify_fixture(b: &HallucinationBenchmark) -> Result<(), String> {
    ensure!(b.corpus.len() == 200, "fixture has {} documents", b.corpus.len());
    for d in &b.designated {
        let doc = &b.corpus.documents[d.doc];
        let prefix = Sequence::new(doc.reference.ids()[..d.position + 1].to_vec());
        let row = b.world.cond_dist(&doc.source, &prefix).unwrap();
        ensure!(entropy_oracle(&row) >= 3.0, "doc {}: designated entropy below 3", d.doc);
        ensure!(row.argmax() == d.distractor, "doc {}: distractor is not the mode", d.doc);
        ensure!(!doc.source.ids().contains(&d.distractor), "doc {}: distractor appears in source", d.doc);
        let marg = brute_marginal(&b.world, &prefix);
        ensure!(
            marg[d.distractor as usize] > marg[d.faithful as usize],
            "doc {}: distractor marginal not above the faithful token's",
            d.doc
        );
        let lib = b.world.exact_marginal_dist(&prefix).unwrap();
        ensure!(
            (lib.prob(d.distractor) - marg[d.distractor as usize]).abs() <= 1e-12,
            "doc {}: library marginal disagrees with brute force",
            d.doc
        );
    }
    Ok(())
}

struct Tuned {
    lambda: f64,
    tau: f64,
}

fn synthetic_benchmark(b: &HallucinationBenchmark, tuned: &mut Option<Tuned>) -> Outcome {
    let start = Instant::now();
    verify_fixture(b)?;
    let plain = decode_all(b, ScoreStrategy::LogProb, BENCH_N_MAX)?;
    let plain_rate = distractor_rate(b, &plain);
    let plain_rouge = mean_rouge(b, &plain);

    let outcome = grid_search(&b.corpus, &b.world, &b.world, &benchmark_grid(), DEFAULT_BEAM, BENCH_N_MAX, 0)
        .map_err(|e| e.to_string())?;
    let s = ScoreStrategy::cpmi(outcome.best_lambda, outcome.best_tau).unwrap();
    let cpmi = decode_all(b, s, BENCH_N_MAX)?;
    let cpmi_rate = distractor_rate(b, &cpmi);
    let cpmi_rouge = mean_rouge(b, &cpmi);
    *tuned = Some(Tuned {
        lambda: outcome.best_lambda,
        tau: outcome.best_tau,
    });

    let reduction = 1.0 - cpmi_rate / plain_rate;
    let detail = format!(
        "tuned λ={} τ={}; distractor rate {:.3} → {:.3} ({:.0}% reduction); ROUGE-L {:.4} → {:.4}",
        outcome.best_lambda,
        outcome.best_tau,
        plain_rate,
        cpmi_rate,
        100.0 * reduction,
        plain_rouge,
        cpmi_rouge
    );
    ensure!(plain_rate >= 0.60, "(a) plain beam distractor rate {plain_rate:.3} < 0.60; {detail}");
    ensure!(reduction >= 0.50, "(b) relative reduction {reduction:.3} < 0.50; {detail}");
    ensure!(plain_rouge - cpmi_rouge <= 0.01, "(c) ROUGE-L dropped by more than 0.01; {detail}");
    let e = within(start, Duration::from_secs(120), "benchmark")?;
    Ok(format!("{detail}; {e:.2?}"))
}

fn delta_direction(b: &HallucinationBenchmark, tuned: &Option<Tuned>) -> Outcome {
    let t = tuned.as_ref().ok_or("no tuned (λ, τ): benchmark criterion did not finish")?;
    let r = delta_by_label(&b.corpus, &b.world, &b.world, t.lambda, t.tau, 0).map_err(|e| e.to_string())?;
    let init = r.get(Category::Initial).ok_or("no initial tokens")?;
    let non = r.get(Category::NonHallucinated).ok_or("no non-hallucinated tokens")?;
    let detail = format!(
        "Δscore initial {:.4} vs non-hallucinated {:.4}; Δrank {:.3} vs {:.3}",
        init.delta_score.mean, non.delta_score.mean, init.delta_rank.mean, non.delta_rank.mean
    );
    ensure!(init.delta_score.mean < non.delta_score.mean, "Δscore direction wrong: {detail}");
    ensure!(init.delta_rank.mean > non.delta_rank.mean, "Δrank direction wrong: {detail}");
    Ok(detail)
}

/// LCS by enumerating every subsequence of the shorter list.
fn lcs_brute(a: &[TokenId], b: &[TokenId]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let is_subseq = |sub: &[TokenId]| {
        let mut it = long.iter();
        sub.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let n = mask.count_ones() as usize;
        if n <= best {
            continue;
        }
        let sub: Vec<TokenId> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        if is_subseq(&sub) {
            best = n;
        }
    }
    best
}

fn rouge_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for i in 0..1000 {
        let alphabet = rng.gen_range(2..8);
        let a: Vec<TokenId> = (0..rng.gen_range(0..=12)).map(|_| rng.gen_range(0..alphabet)).collect();
        let b: Vec<TokenId> = (0..rng.gen_range(0..=12)).map(|_| rng.gen_range(0..alphabet)).collect();
        let lcs = lcs_brute(&a, &b) as f64;
        let expected = if lcs == 0.0 {
            0.0
        } else {
            let (p, r) = (lcs / a.len() as f64, lcs / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        let got = rouge_l_tokens(&a, &b).f1;
        ensure!(got == expected, "pair {i} {a:?} / {b:?}: F1 {got} vs {expected}");
    }
    let v = Vocabulary::with_words(["the", "cat", "sat", "on", "mat"]).unwrap();
    let cand = v.encode("the cat sat", true).unwrap();
    let reference = v.encode("the cat on the mat", true).unwrap();
    let f1 = rouge_l(&cand, &reference, &v).f1;
    ensure!(f1 == 0.5, "worked example F1 = {f1}");
    Ok("1000 random pairs exact; worked example F1 = 0.5".into())
}

fn tuner_determinism() -> Outcome {
    let cfg = BenchmarkConfig {
        documents: 40,
        seed: 77,
        ..Default::default()
    };
    let b = hallucination_benchmark(&cfg).map_err(|e| e.to_string())?;
    let mut grid = GridSpec::new(vec![0.0, 0.25, 0.5], TauAxis::Sampled { sampled: 3 });
    grid.seed = 9;
    let run = |workers| -> Result<Vec<u8>, String> {
        let out = grid_search(&b.corpus, &b.world, &b.world, &grid, DEFAULT_BEAM, BENCH_N_MAX, workers)
            .map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &out.trials, None).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let first = run(1)?;
    let second = run(4)?;
    ensure!(first == second, "heat-map CSVs differ between runs");

    let out = grid_search(&b.corpus, &b.world, &b.world, &grid, DEFAULT_BEAM, BENCH_N_MAX, 0)
        .map_err(|e| e.to_string())?;
    let plain = decode_all(&b, ScoreStrategy::LogProb, BENCH_N_MAX)?;
    let plain_rouge = {
        // same accumulation order as the tuner: document order
        let mut sum = cpmi_core::eval::stats::KahanSum::default();
        for (o, d) in plain.iter().zip(&b.corpus.documents) {
            sum.add(rouge_l(o, &d.reference, &b.corpus.vocabulary).f1);
        }
        sum.total() / plain.len() as f64
    };
    for t in out.trials.iter().filter(|t| t.lambda == 0.0) {
        ensure!(
            t.rouge_l_mean == plain_rouge,
            "λ=0, τ={}: ROUGE {} vs plain beam {}",
            t.tau,
            t.rouge_l_mean,
            plain_rouge
        );
    }
    Ok(format!("{} bytes identical across runs; λ=0 rows match plain beam ROUGE {plain_rouge:.4}", first.len()))
}

#[test]
fn acceptance_criteria() {
    let mut failures = Vec::new();
    let mut report = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                println!("FAIL  {name}: {why}");
                failures.push(name.to_string());
            }
        }
    };

    report("degeneracy identities", &mut degeneracy);
    report("oracle equivalence", &mut oracle_equivalence);
    report("entropy checks", &mut entropy_checks);
    report("marginalization / Bayes consistency", &mut marginal_bayes);

    let bench = hallucination_benchmark(&BenchmarkConfig::default()).expect("benchmark builds");
    let mut tuned = None;
    report("synthetic hallucination benchmark", &mut || synthetic_benchmark(&bench, &mut tuned));
    report("delta-analysis direction", &mut || delta_direction(&bench, &tuned));
    report("ROUGE-L oracle", &mut rouge_oracle);
    report("tuner determinism", &mut tuner_determinism);

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}

#[test]
fn labels_in_benchmark_are_well_formed() {
    let b = hallucination_benchmark(&BenchmarkConfig::default()).unwrap();
    for d in &b.designated {
        let labels = b.corpus.documents[d.doc].labels.as_ref().unwrap();
        if labels[d.position] == TokenLabel::HallucinatedInitial {
            assert_eq!(labels[d.position + 1], TokenLabel::HallucinatedSubsequent);
        }
    }
}
