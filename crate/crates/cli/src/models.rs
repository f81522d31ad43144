//! Turns `--model`, `--model-arg` and `--lm` into model objects.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use clap::ValueEnum;
use cpmi_core::model::{
    BridgeConfig, BridgeConnection, BridgeModel, ConditionalModel, CopyMixtureModel, MarginalModel,
    NGramLM, TableWorld,
};
use cpmi_core::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    /// Source-blind n-gram model (`path=`).
    Ngram,
    /// Copy mixture over an n-gram background (`background=`, `alpha=`).
    Copy,
    /// Exact table world (`path=`).
    Table,
    /// External model server (`addr=HOST:PORT` or `cmd=COMMAND`, `pool=`, `timeout=`).
    Bridge,
}

pub struct ModelArgs {
    args: BTreeMap<String, String>,
}

impl ModelArgs {
    pub fn parse(raw: &[String]) -> Result<Self, String> {
        let mut args = BTreeMap::new();
        for kv in raw {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("--model-arg {kv:?} is not of the form key=value"))?;
            if args.insert(k.trim().to_string(), v.to_string()).is_some() {
                return Err(format!("--model-arg {k} given twice"));
            }
        }
        Ok(ModelArgs { args })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.args.remove(key)
    }

    fn require(&mut self, kind: &str, key: &str) -> Result<String, String> {
        self.take(key)
            .ok_or_else(|| format!("--model {kind} needs --model-arg {key}=..."))
    }

    fn finish(self) -> Result<(), String> {
        match self.args.keys().next() {
            Some(k) => Err(format!("unknown --model-arg {k}")),
            None => Ok(()),
        }
    }
}

/// Where a bridge lives.
#[derive(Debug, Clone)]
pub enum Endpoint {
    Tcp(String),
    Command(Vec<String>),
}

impl Endpoint {
    pub fn connect(&self, cfg: &BridgeConfig) -> cpmi_core::Result<BridgeConnection> {
        match self {
            Endpoint::Tcp(addr) => BridgeConnection::connect(addr, cfg),
            Endpoint::Command(argv) => BridgeConnection::spawn(&argv[0], &argv[1..], cfg),
        }
    }

    fn pool(&self, size: usize, cfg: &BridgeConfig) -> Result<BridgeModel, String> {
        let conns = (0..size.max(1))
            .map(|_| self.connect(cfg))
            .collect::<cpmi_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        BridgeModel::new(conns).map_err(|e| e.to_string())
    }
}

pub struct BridgeSpec {
    pub endpoint: Endpoint,
    pub pool: usize,
    pub config: BridgeConfig,
}

/// Reads `addr=`/`cmd=`, `pool=` and `timeout=` from the model arguments.
pub fn bridge_spec(raw: &[String], default_pool: usize) -> Result<BridgeSpec, String> {
    let mut args = ModelArgs::parse(raw)?;
    let endpoint = match (args.take("addr"), args.take("cmd")) {
        (Some(a), None) => Endpoint::Tcp(a),
        (None, Some(c)) => {
            let argv: Vec<String> = c.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("--model-arg cmd= is empty".into());
            }
            Endpoint::Command(argv)
        }
        _ => return Err("--model bridge needs exactly one of --model-arg addr=... or cmd=...".into()),
    };
    let pool = match args.take("pool") {
        Some(p) => p.parse().map_err(|_| format!("bad pool size {p:?}"))?,
        None => default_pool,
    };
    let mut config = BridgeConfig::default();
    if let Some(t) = args.take("timeout") {
        let secs: f64 = t.parse().map_err(|_| format!("bad timeout {t:?}"))?;
        config.timeout = Duration::from_secs_f64(secs);
    }
    args.finish()?;
    Ok(BridgeSpec {
        endpoint,
        pool,
        config,
    })
}

fn load_ngram(path: &str) -> Result<NGramLM, String> {
    NGramLM::load(&PathBuf::from(path)).map_err(|e| format!("{path}: {e}"))
}

pub struct Models {
    pub cond: Box<dyn ConditionalModel>,
    pub marg: Option<Box<dyn MarginalModel>>,
}

impl Models {
    pub fn vocabulary(&self) -> &Vocabulary {
        self.cond.vocabulary()
    }

    pub fn marg(&self) -> Option<&dyn MarginalModel> {
        self.marg.as_deref()
    }
}

/// Builds the conditional model and, if `lm` is given, the marginal model.
///
/// `lm` is a saved n-gram file, `exact` (the table world's own marginal),
/// `tcp://HOST:PORT`, or `cmd:COMMAND` (a bridge server in marginal mode).
pub fn load(
    kind: ModelKind,
    raw_args: &[String],
    lm: Option<&str>,
    workers: usize,
) -> Result<Models, String> {
    let default_pool = workers.max(1);
    let mut exact_world = None;
    let cond: Box<dyn ConditionalModel> = match kind {
        ModelKind::Ngram => {
            let mut a = ModelArgs::parse(raw_args)?;
            let path = a.require("ngram", "path")?;
            a.finish()?;
            Box::new(load_ngram(&path)?)
        }
        ModelKind::Copy => {
            let mut a = ModelArgs::parse(raw_args)?;
            let bg = a.require("copy", "background")?;
            let alpha = match a.take("alpha") {
                Some(s) => s.parse().map_err(|_| format!("bad alpha {s:?}"))?,
                None => 0.5,
            };
            a.finish()?;
            Box::new(CopyMixtureModel::new(alpha, load_ngram(&bg)?).map_err(|e| e.to_string())?)
        }
        ModelKind::Table => {
            let mut a = ModelArgs::parse(raw_args)?;
            let path = a.require("table", "path")?;
            a.finish()?;
            let world = TableWorld::load(&PathBuf::from(&path)).map_err(|e| format!("{path}: {e}"))?;
            if lm == Some("exact") {
                exact_world = Some(world.clone());
            }
            Box::new(world)
        }
        ModelKind::Bridge => {
            let spec = bridge_spec(raw_args, default_pool)?;
            Box::new(spec.endpoint.pool(spec.pool, &spec.config)?)
        }
    };

    let marg: Option<Box<dyn MarginalModel>> = match lm {
        None => None,
        Some("exact") => match exact_world {
            Some(w) => Some(Box::new(w)),
            None => return Err("--lm exact needs --model table".into()),
        },
        Some(s) if s.starts_with("tcp://") => {
            let ep = Endpoint::Tcp(s["tcp://".len()..].to_string());
            Some(Box::new(ep.pool(default_pool, &BridgeConfig::default())?))
        }
        Some(s) if s.starts_with("cmd:") => {
            let argv: Vec<String> = s["cmd:".len()..].split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("--lm cmd: is empty".into());
            }
            let ep = Endpoint::Command(argv);
            Some(Box::new(ep.pool(default_pool, &BridgeConfig::default())?))
        }
        Some(path) => Some(Box::new(load_ngram(path)?)),
    };
    if let Some(m) = &marg {
        cpmi_core::model::check_same_vocab(cond.vocabulary(), m.vocabulary())
            .map_err(|e| format!("--lm: {e}"))?;
    }
    Ok(Models { cond, marg })
}
