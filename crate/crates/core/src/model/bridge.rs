//! Client side of the newline-delimited JSON protocol used to reach
//! external model processes.
//!
//! ```text
//! server -> engine  {"type":"hello","vocab":[...],"bos":0,"eos":1}
//! engine -> server  {"type":"next","id":7,"source":[0,4,5],"prefix":[0,4]}
//! server -> engine  {"type":"dist","id":7,"log_probs":[...]}
//! engine -> server  {"type":"bye"}
//! ```
//!
//! Zero-probability entries may be sent as `null`, `"-inf"` or
//! `"-Infinity"`. Marginal requests carry an empty `source`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ConditionalModel, LanguageModel, MarginalModel};
use crate::dist::{logsumexp, Distribution};
use crate::error::{Error, Result};
use crate::vocab::{Sequence, TokenId, Vocabulary};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Largest `|logsumexp|` accepted in a reply before renormalization.
pub const REPLY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct BridgeConfig {
    pub timeout: Duration,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Serialize)]
struct NextRequest<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    id: u64,
    source: &'a [TokenId],
    prefix: &'a [TokenId],
}

#[derive(Deserialize)]
struct Hello {
    #[serde(rename = "type")]
    kind: String,
    vocab: Vec<String>,
    bos: TokenId,
    eos: TokenId,
}

/// One serialized request/reply channel to a model server.
pub struct BridgeConnection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    vocab: Vocabulary,
    hello: Value,
    last_id: Option<u64>,
    timeout: Duration,
    broken: bool,
    child: Option<Child>,
}

impl std::fmt::Debug for BridgeConnection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgeConnection")
            .field("vocab_size", &self.vocab.len())
            .field("last_id", &self.last_id)
            .field("broken", &self.broken)
            .finish()
    }
}

impl BridgeConnection {
    /// Wraps an already-open byte stream pair and waits for `hello`.
    pub fn from_streams<R, W>(reader: R, writer: W, config: &BridgeConfig) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut conn = BridgeConnection {
            writer: Box::new(writer),
            lines: rx,
            vocab: Vocabulary::with_words(["?"])?,
            hello: Value::Null,
            last_id: None,
            timeout: config.timeout,
            broken: false,
            child: None,
        };
        let hello = conn.read_message()?;
        let parsed: Hello = serde_json::from_value(hello.clone())
            .map_err(|e| Error::ProtocolViolation(format!("bad hello: {e}")))?;
        if parsed.kind != "hello" {
            return Err(Error::ProtocolViolation(format!(
                "expected hello, got {:?}",
                parsed.kind
            )));
        }
        conn.vocab = Vocabulary::new(parsed.vocab, parsed.bos, parsed.eos)
            .map_err(|e| Error::ProtocolViolation(format!("bad hello vocabulary: {e}")))?;
        conn.hello = hello;
        Ok(conn)
    }

    /// Launches `program args...` and talks to it over stdin/stdout.
    pub fn spawn(program: &str, args: &[String], config: &BridgeConfig) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::BridgeIo(format!("spawning {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        match Self::from_streams(stdout, stdin, config) {
            Ok(mut conn) => {
                conn.child = Some(child);
                Ok(conn)
            }
            Err(e) => {
                let _ = child.kill();
                let _ = child.wait();
                Err(e)
            }
        }
    }

    pub fn connect(addr: &str, config: &BridgeConfig) -> Result<Self> {
        let stream =
            TcpStream::connect(addr).map_err(|e| Error::BridgeIo(format!("{addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let reader = stream
            .try_clone()
            .map_err(|e| Error::BridgeIo(e.to_string()))?;
        Self::from_streams(reader, stream, config)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    /// The raw `hello` message as received.
    pub fn hello(&self) -> &Value {
        &self.hello
    }

    fn read_message(&mut self) -> Result<Value> {
        let line = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                self.broken = true;
                return Err(Error::BridgeIo(e.to_string()));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.broken = true;
                return Err(Error::BridgeTimeout(self.timeout));
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.broken = true;
                return Err(Error::BridgeIo("connection closed by server".into()));
            }
        };
        serde_json::from_str(&line).map_err(|e| {
            self.broken = true;
            Error::ProtocolViolation(format!("unparseable reply {line:?}: {e}"))
        })
    }

    fn send_line(&mut self, bytes: &[u8]) -> Result<()> {
        // one write per message: split writes stall on Nagle + delayed ACK
        let mut line = Vec::with_capacity(bytes.len() + 1);
        line.extend_from_slice(bytes);
        line.push(b'\n');
        let res = self
            .writer
            .write_all(&line)
            .and_then(|_| self.writer.flush());
        res.map_err(|e| {
            self.broken = true;
            Error::BridgeIo(e.to_string())
        })
    }

    fn claim_id(&mut self, id: u64) -> Result<()> {
        if self.broken {
            return Err(Error::BridgeIo("connection is no longer usable".into()));
        }
        if self.last_id.is_some_and(|last| id <= last) {
            return Err(Error::ProtocolViolation(format!(
                "request id {id} is not greater than {}",
                self.last_id.unwrap()
            )));
        }
        self.last_id = Some(id);
        Ok(())
    }

    fn next_id(&self) -> u64 {
        self.last_id.map_or(1, |id| id + 1)
    }

    /// Sends a `next` request and returns the raw reply after checking its
    /// type and id.
    fn request_raw(&mut self, source: &[TokenId], prefix: &[TokenId]) -> Result<(u64, Value)> {
        let id = self.next_id();
        self.claim_id(id)?;
        let msg = serde_json::to_vec(&NextRequest {
            kind: "next",
            id,
            source,
            prefix,
        })?;
        self.send_line(&msg)?;
        let reply = self.read_message()?;
        check_reply_header(&reply, id)?;
        Ok((id, reply))
    }

    /// Requests `p(. | prefix, source)`; an empty source asks for the
    /// marginal.
    pub fn next_dist(&mut self, source: &[TokenId], prefix: &[TokenId]) -> Result<Distribution> {
        let (_, reply) = self.request_raw(source, prefix)?;
        let raw = parse_log_probs(&reply, self.vocab.len())?;
        validate_reply(raw)
    }

    /// Sends an arbitrary request object (its `id` must still increase) and
    /// returns the reply verbatim.
    pub fn exchange(&mut self, request: &Value) -> Result<Value> {
        let id = request
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::ProtocolViolation("request without integer id".into()))?;
        self.claim_id(id)?;
        self.send_line(&serde_json::to_vec(request)?)?;
        self.read_message()
    }

    /// Sends `bye` and waits briefly for a child process to exit.
    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if !self.broken {
            let _ = self.send_line(br#"{"type":"bye"}"#);
            self.broken = true;
        }
        if let Some(mut child) = self.child.take() {
            let deadline = Instant::now() + Duration::from_secs(2);
            loop {
                match child.try_wait() {
                    Ok(Some(_)) => break,
                    Ok(None) if Instant::now() < deadline => {
                        std::thread::sleep(Duration::from_millis(10))
                    }
                    _ => {
                        let _ = child.kill();
                        let _ = child.wait();
                        break;
                    }
                }
            }
        }
    }
}

impl Drop for BridgeConnection {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn check_reply_header(reply: &Value, id: u64) -> Result<()> {
    match reply.get("type").and_then(Value::as_str) {
        Some("dist") => {}
        Some("err") => {
            let msg = reply.get("msg").and_then(Value::as_str).unwrap_or("");
            return Err(Error::ProtocolViolation(format!("server error: {msg}")));
        }
        other => {
            return Err(Error::ProtocolViolation(format!(
                "expected a dist reply, got type {other:?}"
            )))
        }
    }
    match reply.get("id").and_then(Value::as_u64) {
        Some(got) if got == id => Ok(()),
        got => Err(Error::ProtocolViolation(format!(
            "reply id {got:?} does not match request {id}"
        ))),
    }
}

fn parse_log_probs(reply: &Value, size: usize) -> Result<Vec<f64>> {
    let arr = reply
        .get("log_probs")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::ProtocolViolation("reply has no log_probs array".into()))?;
    if arr.len() != size {
        return Err(Error::ProtocolViolation(format!(
            "log_probs has {} entries, vocabulary has {size}",
            arr.len()
        )));
    }
    arr.iter()
        .map(|v| match v {
            Value::Null => Ok(f64::NEG_INFINITY),
            Value::String(s) if s == "-inf" || s == "-Infinity" => Ok(f64::NEG_INFINITY),
            Value::Number(n) => n
                .as_f64()
                .ok_or_else(|| Error::ProtocolViolation(format!("bad number {n}"))),
            other => Err(Error::ProtocolViolation(format!("bad log-prob entry {other}"))),
        })
        .collect()
}

fn validate_reply(raw: Vec<f64>) -> Result<Distribution> {
    if raw.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::ProtocolViolation("non-finite log-prob".into()));
    }
    let z = logsumexp(&raw);
    if !(z.abs() <= REPLY_TOLERANCE) {
        return Err(Error::ProtocolViolation(format!(
            "log_probs sum to exp({z}), outside tolerance {REPLY_TOLERANCE}"
        )));
    }
    Distribution::normalize_log(raw).map_err(|e| Error::ProtocolViolation(e.to_string()))
}

/// A pool of independent connections to equivalent servers. Each request
/// holds one connection for its round trip.
#[derive(Debug)]
pub struct BridgeModel {
    vocab: Vocabulary,
    conns: Vec<Mutex<BridgeConnection>>,
}

impl BridgeModel {
    pub fn new(conns: Vec<BridgeConnection>) -> Result<Self> {
        let first = conns
            .first()
            .ok_or_else(|| Error::BridgeIo("no bridge connections".into()))?;
        let vocab = first.vocabulary().clone();
        for c in &conns[1..] {
            super::check_same_vocab(&vocab, c.vocabulary())?;
        }
        Ok(BridgeModel {
            vocab,
            conns: conns.into_iter().map(Mutex::new).collect(),
        })
    }

    pub fn pool_size(&self) -> usize {
        self.conns.len()
    }

    fn with_conn<T>(&self, f: impl FnOnce(&mut BridgeConnection) -> Result<T>) -> Result<T> {
        for c in &self.conns {
            if let Ok(mut guard) = c.try_lock() {
                return f(&mut guard);
            }
        }
        let mut guard = self.conns[0]
            .lock()
            .map_err(|_| Error::BridgeIo("bridge connection poisoned".into()))?;
        f(&mut guard)
    }

    fn request(&self, source: &[TokenId], prefix: &Sequence) -> Result<Distribution> {
        prefix.check_prefix(&self.vocab)?;
        self.with_conn(|c| c.next_dist(source, prefix.ids()))
    }
}

impl LanguageModel for BridgeModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }
}

impl ConditionalModel for BridgeModel {
    fn cond_dist(&self, source: &Sequence, prefix: &Sequence) -> Result<Distribution> {
        self.request(source.ids(), prefix)
    }
}

impl MarginalModel for BridgeModel {
    fn marginal_dist(&self, prefix: &Sequence) -> Result<Distribution> {
        self.request(&[], prefix)
    }
}

/// One line of a golden transcript: either the expected `hello`, or a
/// request with its expected reply.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldenExchange {
    Hello { hello: Value },
    Exchange { request: Value, reply: Value },
}

impl GoldenExchange {
    pub fn read_jsonl(text: &str) -> Result<Vec<GoldenExchange>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ConformanceReport {
    pub golden_checked: usize,
    pub golden_failures: Vec<String>,
    pub random_requests: usize,
    pub random_failures: Vec<String>,
    /// Largest `|logsumexp|` seen in a raw reply.
    pub max_norm_error: f64,
}

impl ConformanceReport {
    /// Raw replies must already be normalized to this tolerance.
    pub const NORM_LIMIT: f64 = 1e-6;

    pub fn passed(&self) -> bool {
        self.golden_failures.is_empty()
            && self.random_failures.is_empty()
            && self.max_norm_error <= Self::NORM_LIMIT
    }
}

impl BridgeConnection {
    /// Replays `golden`, then sends `random_requests` random well-formed
    /// requests and checks ids, lengths and normalization of every reply.
    pub fn check_conformance(
        &mut self,
        golden: &[GoldenExchange],
        random_requests: usize,
        seed: u64,
    ) -> ConformanceReport {
        let mut report = ConformanceReport::default();
        for (i, g) in golden.iter().enumerate() {
            report.golden_checked += 1;
            match g {
                GoldenExchange::Hello { hello } => {
                    if hello != &self.hello {
                        report
                            .golden_failures
                            .push(format!("line {}: hello differs", i + 1));
                    }
                }
                GoldenExchange::Exchange { request, reply } => match self.exchange(request) {
                    Ok(got) if &got == reply => {}
                    Ok(got) => report.golden_failures.push(format!(
                        "line {}: expected {reply}, got {got}",
                        i + 1
                    )),
                    Err(e) => report.golden_failures.push(format!("line {}: {e}", i + 1)),
                },
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let content: Vec<TokenId> = self.vocab.content_ids().collect();
        let bos = self.vocab.bos();
        for _ in 0..random_requests {
            report.random_requests += 1;
            let mut source = vec![bos];
            let mut prefix = vec![bos];
            if !content.is_empty() {
                for _ in 0..rng.gen_range(0..8) {
                    source.push(content[rng.gen_range(0..content.len())]);
                }
                for _ in 0..rng.gen_range(0..6) {
                    prefix.push(content[rng.gen_range(0..content.len())]);
                }
            }
            if rng.gen_bool(0.25) {
                source.clear();
            }
            let outcome = self.request_raw(&source, &prefix).and_then(|(_, reply)| {
                let raw = parse_log_probs(&reply, self.vocab.len())?;
                let z = logsumexp(&raw);
                validate_reply(raw)?;
                Ok(z.abs())
            });
            match outcome {
                Ok(err) => report.max_norm_error = report.max_norm_error.max(err),
                Err(e) => {
                    report.random_failures.push(e.to_string());
                    if self.broken {
                        break;
                    }
                }
            }
        }
        report
    }
}
