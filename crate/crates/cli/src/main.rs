//! `cpmi`: decode, score, analyse and tune with log-probability, PMI and
//! entropy-gated PMI scoring.
//!
//! Exit codes: 0 on success, 1 when any document (or tuning trial) fails,
//! 2 on configuration errors.

mod models;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpmi_core::corpus::{load_corpus, Corpus};
use cpmi_core::decoder::{decode_corpus, write_decode_jsonl, DecodeRecord, DEFAULT_BEAM};
use cpmi_core::eval::{
    corpus_factscore, delta_by_label, entropy_by_label, mean_rouge, rouge_l_tokens, Averaging,
};
use cpmi_core::model::{train_ngram, GoldenExchange, TrainingFields};
use cpmi_core::scoring::{score_sequence, write_trace_jsonl, ScoreStrategy, TRANS2S_LAMBDA, TRANS2S_TAU};
use cpmi_core::tuner::{grid_search, write_heatmap_csv, GridSpec};
use cpmi_core::vocab::tokenize;

use models::{ModelKind, Models};

#[derive(Parser)]
#[command(name = "cpmi", version, about = "Beam search with entropy-gated PMI scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every source in the corpus.
    Decode(DecodeCmd),
    /// Score each reference token by token and write the traces.
    Score(DecodeCmd),
    /// Change in reference-token score and rank under CPMI, by label.
    Delta(AnalysisCmd),
    /// Conditional entropy of reference tokens, by label.
    Entropy(AnalysisCmd),
    /// ROUGE-L of decoded hypotheses against the corpus references.
    Rouge(RougeCmd),
    /// Mean fraction of reference tokens labeled non-hallucinated.
    Factscore(FactscoreCmd),
    /// Grid search over (lambda, tau) and write the heat-map CSV.
    Tune(TuneCmd),
    /// Train an n-gram model on a corpus.
    TrainLm(TrainLmCmd),
    /// Probe a bridge server for protocol conformance.
    BridgeCheck(BridgeCheckCmd),
}

#[derive(Args)]
struct ModelOpts {
    /// Labeled corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Model parameter as key=value; repeatable.
    #[arg(long = "model-arg", value_name = "K=V")]
    model_arg: Vec<String>,
    /// Marginal model: n-gram file, `exact`, `tcp://HOST:PORT` or `cmd:COMMAND`.
    #[arg(long)]
    lm: Option<String>,
    /// Document-level threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyKind {
    /// Plain log-probability.
    Beam,
    Pmi,
    Cpmi,
}

#[derive(Args)]
struct StrategyOpts {
    #[arg(long, value_enum, default_value = "beam")]
    strategy: StrategyKind,
    #[arg(long, default_value_t = TRANS2S_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = TRANS2S_TAU)]
    tau: f64,
}

impl StrategyOpts {
    fn strategy(&self) -> cpmi_core::Result<ScoreStrategy> {
        match self.strategy {
            StrategyKind::Beam => Ok(ScoreStrategy::LogProb),
            StrategyKind::Pmi => ScoreStrategy::pmi(self.lambda),
            StrategyKind::Cpmi => ScoreStrategy::cpmi(self.lambda, self.tau),
        }
    }
}

#[derive(Args)]
struct DecodeCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[command(flatten)]
    strategy: StrategyOpts,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    /// Maximum number of content tokens.
    #[arg(long = "max-len", default_value_t = 64)]
    max_len: usize,
    /// Accepted for a uniform interface; decoding is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include per-step traces in the output.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct AnalysisCmd {
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long, default_value_t = TRANS2S_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = TRANS2S_TAU)]
    tau: f64,
    /// CSV output (the text table always goes to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RougeCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// Decode output (JSON lines with `id` and `text`).
    #[arg(long)]
    hyp: PathBuf,
    /// Per-document CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FactscoreCmd {
    #[arg(long)]
    corpus: PathBuf,
    /// Pool tokens across documents instead of averaging per document.
    #[arg(long)]
    micro: bool,
}

#[derive(Args)]
struct TuneCmd {
    #[command(flatten)]
    model: ModelOpts,
    /// Grid specification (JSON).
    #[arg(long)]
    grid: PathBuf,
    /// Overrides the grid file's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    beam: usize,
    #[arg(long = "max-len", default_value_t = 64)]
    max_len: usize,
    /// Heat-map CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fields {
    References,
    Both,
}

#[derive(Args)]
struct TrainLmCmd {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    /// Add-k smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    k: f64,
    #[arg(long, value_enum, default_value = "references")]
    fields: Fields,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BridgeCheckCmd {
    /// `addr=HOST:PORT` or `cmd=COMMAND`, plus optional `timeout=SECS`.
    #[arg(long = "model-arg", value_name = "K=V", required = true)]
    model_arg: Vec<String>,
    /// Golden transcript to replay first (JSON lines).
    #[arg(long)]
    golden: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Why a run stopped.
enum Failure {
    /// Bad flags, unreadable inputs, incompatible models.
    Config(String),
    /// Some documents or trials failed; outputs for the rest were written.
    Partial(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn output(path: Option<&Path>) -> std::io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn open_models(m: &ModelOpts) -> Result<(Models, Corpus), Failure> {
    let models = models::load(m.model, &m.model_arg, m.lm.as_deref(), m.workers).map_err(Failure::Config)?;
    let corpus = load_corpus(&m.corpus, Some(models.vocabulary()))?;
    Ok((models, corpus))
}

fn check_marginal(strategy: ScoreStrategy, models: &Models) -> Outcome {
    if strategy.needs_marginal() && models.marg.is_none() {
        return Err(Failure::Config(format!(
            "{} (pass --lm)",
            cpmi_core::Error::MissingMarginal
        )));
    }
    Ok(())
}

fn decode(cmd: &DecodeCmd) -> Outcome {
    let strategy = cmd.strategy.strategy()?;
    let (models, corpus) = open_models(&cmd.model)?;
    check_marginal(strategy, &models)?;
    let results = decode_corpus(
        strategy,
        models.cond.as_ref(),
        models.marg(),
        &corpus,
        cmd.beam,
        cmd.max_len,
        cmd.model.workers,
    )?;
    let mut out = output(cmd.out.as_deref())?;
    let failed = write_decode_jsonl(&mut out, &results, &corpus.vocabulary, cmd.trace)?;
    out.flush()?;
    eprintln!("decoded {} documents with {strategy}", results.len() - failed);
    partial(failed, results.len())
}

fn partial(failed: usize, total: usize) -> Outcome {
    if failed > 0 {
        Err(Failure::Partial(
            cpmi_core::Error::DocumentsFailed { failed, total }.to_string(),
        ))
    } else {
        Ok(())
    }
}

fn score(cmd: &DecodeCmd) -> Outcome {
    let strategy = cmd.strategy.strategy()?;
    let (models, corpus) = open_models(&cmd.model)?;
    check_marginal(strategy, &models)?;
    let mut out = output(cmd.out.as_deref())?;
    let mut failed = 0;
    for doc in &corpus.documents {
        match score_sequence(strategy, models.cond.as_ref(), models.marg(), &doc.source, &doc.reference) {
            Ok(s) => write_trace_jsonl(&mut out, &doc.id, &s.steps)?,
            Err(e) => {
                eprintln!("{}: {e}", doc.id);
                failed += 1;
            }
        }
    }
    out.flush()?;
    partial(failed, corpus.len())
}

fn delta(cmd: &AnalysisCmd) -> Outcome {
    let (models, corpus) = open_models(&cmd.model)?;
    let marg = models
        .marg()
        .ok_or_else(|| Failure::Config(format!("{} (pass --lm)", cpmi_core::Error::MissingMarginal)))?;
    ScoreStrategy::cpmi(cmd.lambda, cmd.tau)?;
    corpus.require_labels()?;
    let report = delta_by_label(&corpus, models.cond.as_ref(), marg, cmd.lambda, cmd.tau, cmd.model.workers)
        .map_err(|e| Failure::Partial(e.to_string()))?;
    print!("{}", report.to_table());
    if let Some(p) = &cmd.out {
        report.write_csv(File::create(p)?)?;
    }
    Ok(())
}

fn entropy(cmd: &AnalysisCmd) -> Outcome {
    let (models, corpus) = open_models(&cmd.model)?;
    corpus.require_labels()?;
    let report = entropy_by_label(&corpus, models.cond.as_ref(), cmd.model.workers)
        .map_err(|e| Failure::Partial(e.to_string()))?;
    print!("{}", report.to_table());
    if let Some(p) = &cmd.out {
        report.write_csv(File::create(p)?)?;
    }
    Ok(())
}

fn rouge(cmd: &RougeCmd) -> Outcome {
    let corpus = load_corpus(&cmd.corpus, None)?;
    let mut hyps = HashMap::new();
    for (i, line) in BufReader::new(File::open(&cmd.hyp)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DecodeRecord = serde_json::from_str(&line)
            .map_err(|e| Failure::Config(format!("{}:{}: {e}", cmd.hyp.display(), i + 1)))?;
        hyps.insert(rec.id.clone(), rec);
    }
    // interned word ids: hypotheses may use words the corpus never saw
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |text: &str| -> Vec<u32> {
        tokenize(text)
            .map(|w| {
                let n = ids.len() as u32;
                *ids.entry(w).or_insert(n)
            })
            .collect()
    };
    let mut rows = Vec::new();
    let mut failed = 0;
    for doc in &corpus.documents {
        let Some(text) = hyps.get(&doc.id).and_then(|r| r.text.as_deref()) else {
            eprintln!("{}: no hypothesis", doc.id);
            failed += 1;
            continue;
        };
        let reference = corpus.vocabulary.decode(&doc.reference);
        let s = rouge_l_tokens(&intern(text), &intern(&reference));
        rows.push((doc.id.as_str(), s));
    }
    let mean = mean_rouge(rows.iter().map(|r| r.1))
        .ok_or_else(|| Failure::Partial("no document could be scored".into()))?;
    println!(
        "ROUGE-L over {} documents: P {:.4}  R {:.4}  F1 {:.4}",
        rows.len(),
        mean.precision,
        mean.recall,
        mean.f1
    );
    if let Some(p) = &cmd.out {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "id,precision,recall,f1")?;
        for (id, s) in &rows {
            writeln!(w, "{id},{},{},{}", s.precision, s.recall, s.f1)?;
        }
        w.flush()?;
    }
    partial(failed, corpus.len())
}

fn factscore(cmd: &FactscoreCmd) -> Outcome {
    let corpus = load_corpus(&cmd.corpus, None)?;
    let averaging = if cmd.micro { Averaging::Micro } else { Averaging::Macro };
    println!("{}", corpus_factscore(&corpus, averaging)?);
    Ok(())
}

fn tune(cmd: &TuneCmd) -> Outcome {
    let mut grid = GridSpec::load(&cmd.grid).map_err(|e| Failure::Config(format!("{}: {e}", cmd.grid.display())))?;
    if let Some(seed) = cmd.seed {
        grid.seed = seed;
    }
    let (models, corpus) = open_models(&cmd.model)?;
    let marg = models
        .marg()
        .ok_or_else(|| Failure::Config(format!("{} (pass --lm)", cpmi_core::Error::MissingMarginal)))?;
    corpus.require_labels()?;
    let result = grid_search(
        &corpus,
        models.cond.as_ref(),
        marg,
        &grid,
        cmd.beam,
        cmd.max_len,
        cmd.model.workers,
    );
    let mut out = output(cmd.out.as_deref())?;
    match result {
        Ok(outcome) => {
            write_heatmap_csv(&mut out, &outcome.trials, None)?;
            out.flush()?;
            let b = outcome.best();
            eprintln!(
                "best: lambda {} tau {} (ROUGE-L {:.4}, initial-token score {:.4}, objective {:.4})",
                b.lambda, b.tau, b.rouge_l_mean, b.avg_logprob_initial, b.objective
            );
            Ok(())
        }
        Err(failure) => {
            let msg = failure.error.to_string();
            write_heatmap_csv(&mut out, &failure.completed, Some(&msg))?;
            out.flush()?;
            Err(Failure::Partial(failure.to_string()))
        }
    }
}

fn train_lm(cmd: &TrainLmCmd) -> Outcome {
    let corpus = load_corpus(&cmd.corpus, None)?;
    let fields = match cmd.fields {
        Fields::References => TrainingFields::ReferencesOnly,
        Fields::Both => TrainingFields::SourcesAndReferences,
    };
    let lm = train_ngram(&corpus, cmd.order, cmd.k, fields)?;
    lm.save(&cmd.out)?;
    eprintln!(
        "trained order-{} model over {} tokens on {} documents",
        cmd.order,
        corpus.vocabulary.len(),
        corpus.len()
    );
    Ok(())
}

fn bridge_check(cmd: &BridgeCheckCmd) -> Outcome {
    let spec = models::bridge_spec(&cmd.model_arg, 1).map_err(Failure::Config)?;
    let golden = match &cmd.golden {
        Some(p) => GoldenExchange::read_jsonl(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    let mut conn = spec.endpoint.connect(&spec.config)?;
    let report = conn.check_conformance(&golden, cmd.requests, cmd.seed);
    conn.close();
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed() {
        eprintln!("bridge conforms");
        Ok(())
    } else {
        Err(Failure::Partial("bridge does not conform".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Decode(c) => decode(c),
        Command::Score(c) => score(c),
        Command::Delta(c) => delta(c),
        Command::Entropy(c) => entropy(c),
        Command::Rouge(c) => rouge(c),
        Command::Factscore(c) => factscore(c),
        Command::Tune(c) => tune(c),
        Command::TrainLm(c) => train_lm(c),
        Command::BridgeCheck(c) => bridge_check(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
