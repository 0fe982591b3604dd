//! Echo logit server: a protocol test double that answers every `dists`
//! request with uniform rows. Speaks the same newline-delimited JSON
//! framing as a real backend, over stdio by default or TCP.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;

use serde::Deserialize;
use serde_json::json;

use crate::remote::PROTOCOL_VERSION;
use crate::Result;

#[derive(Debug, Deserialize)]
struct RequestFrame {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default)]
    id: Option<u64>,
    #[serde(default)]
    protocol: Option<u32>,
    #[serde(default)]
    tokens: Option<Vec<u32>>,
    #[serde(default)]
    start: Option<usize>,
}

fn respond(out: &mut impl Write, frame: &serde_json::Value) -> std::io::Result<()> {
    let mut line = serde_json::to_string(frame).expect("serializable frame");
    line.push('\n');
    out.write_all(line.as_bytes())?;
    out.flush()
}

fn handle_line(line: &str, vocab_size: usize, out: &mut impl Write) -> std::io::Result<()> {
    let frame: RequestFrame = match serde_json::from_str(line) {
        Ok(f) => f,
        Err(e) => {
            return respond(
                out,
                &json!({"type": "error", "id": null, "message": format!("malformed request: {e}")}),
            );
        }
    };
    match frame.kind.as_str() {
        "hello" => {
            if frame.protocol != Some(PROTOCOL_VERSION) {
                return respond(
                    out,
                    &json!({"type": "error", "id": frame.id, "message": "unsupported protocol"}),
                );
            }
            respond(
                out,
                &json!({"type": "hello", "vocab_size": vocab_size, "name": "echo"}),
            )
        }
        "dists" => {
            let (tokens, start) = match (frame.tokens, frame.start) {
                (Some(t), Some(s)) if s <= t.len() => (t, s),
                _ => {
                    return respond(
                        out,
                        &json!({"type": "error", "id": frame.id, "message": "bad dists request"}),
                    );
                }
            };
            let row = vec![1.0 / vocab_size as f64; vocab_size];
            let rows = vec![row; tokens.len() - start];
            respond(out, &json!({"type": "dists", "id": frame.id, "probs": rows}))
        }
        other => respond(
            out,
            &json!({"type": "error", "id": frame.id, "message": format!("unknown type '{other}'")}),
        ),
    }
}

/// Serves one session: request frames in, response frames out, until EOF.
pub fn serve_session(reader: impl Read, mut writer: impl Write, vocab_size: usize) -> Result<()> {
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        handle_line(&line, vocab_size, &mut writer)?;
    }
    Ok(())
}

/// Serves on stdin/stdout until the peer closes stdin.
pub fn serve_stdio(vocab_size: usize) -> Result<()> {
    serve_session(std::io::stdin().lock(), std::io::stdout().lock(), vocab_size)
}

/// Binds `127.0.0.1:port` (0 picks a free port), prints the bound address
/// as the first stdout line, then serves connections until killed.
pub fn serve_tcp(port: u16, vocab_size: usize) -> Result<()> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    for stream in listener.incoming() {
        let stream = stream?;
        let reader = stream.try_clone()?;
        std::thread::spawn(move || {
            let _ = serve_session(reader, stream, vocab_size);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(request: &str, vocab_size: usize) -> serde_json::Value {
        let mut out = Vec::new();
        handle_line(request, vocab_size, &mut out).unwrap();
        serde_json::from_slice(&out).unwrap()
    }

    #[test]
    fn hello_reports_vocab() {
        let reply = roundtrip(r#"{"type":"hello","protocol":1}"#, 7);
        assert_eq!(reply["type"], "hello");
        assert_eq!(reply["vocab_size"], 7);
    }

    #[test]
    fn dists_rows_are_uniform() {
        let reply = roundtrip(r#"{"type":"dists","id":3,"tokens":[0,1,2],"start":1}"#, 4);
        assert_eq!(reply["id"], 3);
        let rows = reply["probs"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].as_array().unwrap().len(), 4);
        assert_eq!(rows[0][0], 0.25);
    }

    #[test]
    fn start_at_end_gives_empty_rows() {
        let reply = roundtrip(r#"{"type":"dists","id":0,"tokens":[5],"start":1}"#, 3);
        assert_eq!(reply["probs"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn malformed_request_yields_error_frame() {
        let reply = roundtrip("not json", 3);
        assert_eq!(reply["type"], "error");
    }
}
