//! Client for the newline-delimited JSON logit-server protocol.
//!
//! One object per line, UTF-8. Handshake:
//! `{"type":"hello","protocol":1}` →
//! `{"type":"hello","vocab_size":V,"name":...}`. Inference:
//! `{"type":"dists","id":n,"tokens":[...],"start":s}` →
//! `{"type":"dists","id":n,"probs":[[...], ...]}` with one row per prefix
//! position in `[start, len(tokens))`, each summing to 1 within 1e-6.
//! Servers report failures as `{"type":"error","id":n,"message":...}`.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::Mutex;
use std::time::Duration;

use fsd_core::models::ModelBackend;
use fsd_core::prob::{ProbDist, TokenId};
use serde::Deserialize;
use serde_json::json;

use crate::{LabError, Result};

pub const PROTOCOL_VERSION: u32 = 1;
/// How far a response row's sum may stray from 1 before the frame is
/// rejected; rows inside the tolerance are renormalized exactly.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum Transport {
    /// Spawn `argv` and speak over its stdin/stdout.
    Subprocess(Vec<String>),
    /// Connect to `host:port`, identical framing.
    Tcp(String),
}

#[derive(Debug, Clone)]
pub struct RemoteModelConfig {
    pub transport: Transport,
    pub timeout_ms: u64,
    /// Vocabulary size the handshake must confirm.
    pub vocab_size: usize,
}

/// Every response frame, decoded loosely; field presence is checked
/// against the declared `type`.
#[derive(Debug, Deserialize)]
struct ResponseFrame {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    id: Option<u64>,
    #[serde(default)]
    vocab_size: Option<usize>,
    #[serde(default)]
    #[allow(dead_code)]
    name: Option<String>,
    #[serde(default)]
    probs: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    message: Option<String>,
}

/// A single session: writer plus a reader thread that forwards lines over
/// a channel so every read can carry the configured timeout.
struct Session {
    writer: Box<dyn Write + Send>,
    lines: mpsc::Receiver<std::io::Result<String>>,
    child: Option<Child>,
    next_id: u64,
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_reader<R: Read + Send + 'static>(reader: R) -> mpsc::Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

impl Session {
    fn open(transport: &Transport) -> Result<Self> {
        match transport {
            Transport::Subprocess(argv) => {
                let (program, args) = argv
                    .split_first()
                    .ok_or_else(|| LabError::Config("empty subprocess command".into()))?;
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Session {
                    writer: Box::new(stdin),
                    lines: spawn_reader(stdout),
                    child: Some(child),
                    next_id: 0,
                })
            }
            Transport::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                let reader = stream.try_clone()?;
                Ok(Session {
                    writer: Box::new(stream),
                    lines: spawn_reader(reader),
                    child: None,
                    next_id: 0,
                })
            }
        }
    }

    fn send(&mut self, frame: &serde_json::Value) -> Result<()> {
        let mut line = serde_json::to_string(frame)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self, timeout_ms: u64) -> Result<ResponseFrame> {
        let line = match self.lines.recv_timeout(Duration::from_millis(timeout_ms)) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(LabError::Io(e)),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return Err(LabError::Timeout { ms: timeout_ms })
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(LabError::ProtocolViolation("connection closed".into()))
            }
        };
        serde_json::from_str(&line)
            .map_err(|e| LabError::ProtocolViolation(format!("malformed frame: {e}")))
    }
}

pub struct RemoteModel {
    session: Mutex<Session>,
    vocab_size: usize,
    timeout_ms: u64,
}

impl RemoteModel {
    /// Opens the transport and performs the hello handshake, rejecting a
    /// vocabulary mismatch up front.
    pub fn connect(cfg: &RemoteModelConfig) -> Result<Self> {
        let mut session = Session::open(&cfg.transport)?;
        session.send(&json!({"type": "hello", "protocol": PROTOCOL_VERSION}))?;
        let frame = session.recv(cfg.timeout_ms)?;
        if frame.kind != "hello" {
            return Err(LabError::ProtocolViolation(format!(
                "expected hello, got '{}'",
                frame.kind
            )));
        }
        let actual = frame
            .vocab_size
            .ok_or_else(|| LabError::ProtocolViolation("hello missing vocab_size".into()))?;
        if actual != cfg.vocab_size {
            return Err(LabError::VocabMismatch {
                expected: cfg.vocab_size,
                actual,
            });
        }
        Ok(RemoteModel {
            session: Mutex::new(session),
            vocab_size: cfg.vocab_size,
            timeout_ms: cfg.timeout_ms,
        })
    }

    fn validate_row(&self, row: &[f64]) -> Result<ProbDist> {
        if row.len() != self.vocab_size {
            return Err(LabError::ProtocolViolation(format!(
                "row has {} entries, vocab is {}",
                row.len(),
                self.vocab_size
            )));
        }
        let mut sum = 0.0;
        for &x in row {
            if !x.is_finite() || x < 0.0 {
                return Err(LabError::ProtocolViolation(format!(
                    "invalid probability {x}"
                )));
            }
            sum += x;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(LabError::ProtocolViolation(format!(
                "row sums to {sum}, expected 1 within {ROW_SUM_TOL}"
            )));
        }
        Ok(ProbDist::normalize(row)?)
    }

    /// One request/response round trip: distributions after each prefix of
    /// `tokens` with length in `[start, tokens.len())`.
    pub fn request_dists(&self, tokens: &[TokenId], start: usize) -> Result<Vec<ProbDist>> {
        assert!(start <= tokens.len(), "start past end of tokens");
        let expected_rows = tokens.len() - start;
        let mut session = self.session.lock().expect("remote session poisoned");
        let id = session.next_id;
        session.next_id += 1;
        let token_ids: Vec<u32> = tokens.iter().map(|t| t.0).collect();
        session.send(&json!({
            "type": "dists",
            "id": id,
            "tokens": token_ids,
            "start": start,
        }))?;
        let frame = session.recv(self.timeout_ms)?;
        drop(session);

        if frame.id != Some(id) {
            return Err(LabError::ProtocolViolation(format!(
                "response id {:?} does not match request id {id}",
                frame.id
            )));
        }
        match frame.kind.as_str() {
            "dists" => {
                let probs = frame
                    .probs
                    .ok_or_else(|| LabError::ProtocolViolation("dists missing probs".into()))?;
                if probs.len() != expected_rows {
                    return Err(LabError::ProtocolViolation(format!(
                        "expected {expected_rows} rows, got {}",
                        probs.len()
                    )));
                }
                probs.iter().map(|row| self.validate_row(row)).collect()
            }
            "error" => Err(LabError::ProtocolViolation(format!(
                "server error: {}",
                frame.message.unwrap_or_default()
            ))),
            other => Err(LabError::ProtocolViolation(format!(
                "unexpected frame type '{other}'"
            ))),
        }
    }
}

impl ModelBackend for RemoteModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[TokenId]) -> fsd_core::Result<ProbDist> {
        // The wire format never conditions on the final token, so a padding
        // token extends the request to cover the full-context position.
        let mut tokens = context.to_vec();
        tokens.push(TokenId(0));
        let mut rows = self
            .request_dists(&tokens, context.len())
            .map_err(to_backend_error)?;
        Ok(rows.pop().expect("one row for one position"))
    }

    fn next_dists(&self, context: &[TokenId], start: usize) -> fsd_core::Result<Vec<ProbDist>> {
        self.request_dists(context, start).map_err(to_backend_error)
    }
}

fn to_backend_error(e: LabError) -> fsd_core::Error {
    match e {
        LabError::Core(inner) => inner,
        other => fsd_core::Error::Backend {
            block: 0,
            message: other.to_string(),
        },
    }
}
