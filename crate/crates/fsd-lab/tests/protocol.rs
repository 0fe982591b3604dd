//! Wire-protocol tests: the real client against the echo server binary,
//! plus hostile in-test servers for the failure paths.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use fsd_core::models::ModelBackend;
use fsd_core::prob::TokenId;
use fsd_lab::remote::{RemoteModel, RemoteModelConfig, Transport};
use fsd_lab::LabError;

fn echo_config(vocab_size: usize) -> RemoteModelConfig {
    RemoteModelConfig {
        transport: Transport::Subprocess(vec![
            env!("CARGO_BIN_EXE_fsdlab").to_string(),
            "serve-echo".to_string(),
            "--vocab-size".to_string(),
            vocab_size.to_string(),
        ]),
        timeout_ms: 5000,
        vocab_size,
    }
}

#[test]
fn echo_round_trips_1000_requests() {
    let model = RemoteModel::connect(&echo_config(8)).unwrap();
    for i in 0..1000u32 {
        let tokens: Vec<TokenId> = (0..1 + i % 5).map(|t| TokenId(t % 8)).collect();
        let start = (i % tokens.len() as u32) as usize;
        let rows = model.request_dists(&tokens, start).unwrap();
        assert_eq!(rows.len(), tokens.len() - start);
        for row in rows {
            assert_eq!(row.vocab_size(), 8);
            assert!((row.prob(TokenId(0)) - 0.125).abs() < 1e-15);
        }
    }
}

#[test]
fn start_at_end_returns_empty() {
    let model = RemoteModel::connect(&echo_config(4)).unwrap();
    let tokens = [TokenId(1), TokenId(2)];
    assert!(model.request_dists(&tokens, 2).unwrap().is_empty());
}

#[test]
fn backend_trait_shapes_match_table_semantics() {
    let model = RemoteModel::connect(&echo_config(4)).unwrap();
    let ctx = [TokenId(0), TokenId(1), TokenId(2)];
    let single = model.next_dist(&ctx).unwrap();
    assert_eq!(single.vocab_size(), 4);
    let batched = model.next_dists(&ctx, 1).unwrap();
    assert_eq!(batched.len(), 2);
}

#[test]
fn handshake_vocab_mismatch() {
    let mut cfg = echo_config(8);
    cfg.vocab_size = 9;
    match RemoteModel::connect(&cfg) {
        Err(LabError::VocabMismatch {
            expected: 9,
            actual: 8,
        }) => {}
        Err(other) => panic!("expected vocab mismatch, got {other:?}"),
        Ok(_) => panic!("expected vocab mismatch, connection succeeded"),
    }
}

/// A one-connection TCP server scripted with canned response lines.
fn scripted_server(responses: Vec<String>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut stream = stream;
        for response in responses {
            let mut request = String::new();
            if reader.read_line(&mut request).unwrap() == 0 {
                return;
            }
            stream.write_all(response.as_bytes()).unwrap();
            stream.write_all(b"\n").unwrap();
        }
        // Script exhausted: hold the socket open (silently) until EOF so
        // the client sees a timeout rather than a closed connection.
        let mut sink = String::new();
        while reader.read_line(&mut sink).unwrap_or(0) > 0 {
            sink.clear();
        }
    });
    addr
}

fn tcp_config(addr: String, vocab_size: usize) -> RemoteModelConfig {
    RemoteModelConfig {
        transport: Transport::Tcp(addr),
        timeout_ms: 2000,
        vocab_size,
    }
}

#[test]
fn malformed_sum_is_a_protocol_violation() {
    let addr = scripted_server(vec![
        r#"{"type":"hello","vocab_size":2,"name":"fake"}"#.to_string(),
        // Row sums to 0.5: outside the 1e-6 tolerance.
        r#"{"type":"dists","id":0,"probs":[[0.25,0.25]]}"#.to_string(),
    ]);
    let model = RemoteModel::connect(&tcp_config(addr, 2)).unwrap();
    let err = model
        .request_dists(&[TokenId(0), TokenId(1)], 1)
        .unwrap_err();
    assert!(
        matches!(&err, LabError::ProtocolViolation(m) if m.contains("sums to")),
        "{err:?}"
    );
}

#[test]
fn wrong_row_count_is_a_protocol_violation() {
    let addr = scripted_server(vec![
        r#"{"type":"hello","vocab_size":2,"name":"fake"}"#.to_string(),
        r#"{"type":"dists","id":0,"probs":[[0.5,0.5],[0.5,0.5]]}"#.to_string(),
    ]);
    let model = RemoteModel::connect(&tcp_config(addr, 2)).unwrap();
    let err = model
        .request_dists(&[TokenId(0), TokenId(1)], 1)
        .unwrap_err();
    assert!(matches!(err, LabError::ProtocolViolation(_)), "{err:?}");
}

#[test]
fn mismatched_id_is_a_protocol_violation() {
    let addr = scripted_server(vec![
        r#"{"type":"hello","vocab_size":2,"name":"fake"}"#.to_string(),
        r#"{"type":"dists","id":99,"probs":[[0.5,0.5]]}"#.to_string(),
    ]);
    let model = RemoteModel::connect(&tcp_config(addr, 2)).unwrap();
    let err = model
        .request_dists(&[TokenId(0), TokenId(1)], 1)
        .unwrap_err();
    assert!(matches!(err, LabError::ProtocolViolation(_)), "{err:?}");
}

#[test]
fn error_frame_surfaces_as_protocol_violation() {
    let addr = scripted_server(vec![
        r#"{"type":"hello","vocab_size":2,"name":"fake"}"#.to_string(),
        r#"{"type":"error","id":0,"message":"backend exploded"}"#.to_string(),
    ]);
    let model = RemoteModel::connect(&tcp_config(addr, 2)).unwrap();
    let err = model
        .request_dists(&[TokenId(0), TokenId(1)], 1)
        .unwrap_err();
    assert!(
        matches!(&err, LabError::ProtocolViolation(m) if m.contains("backend exploded")),
        "{err:?}"
    );
}

#[test]
fn silent_server_times_out() {
    // Handshake succeeds, then the server goes quiet.
    let addr = scripted_server(vec![
        r#"{"type":"hello","vocab_size":2,"name":"fake"}"#.to_string(),
    ]);
    let mut cfg = tcp_config(addr, 2);
    cfg.timeout_ms = 200;
    let model = RemoteModel::connect(&cfg).unwrap();
    let err = model
        .request_dists(&[TokenId(0), TokenId(1)], 1)
        .unwrap_err();
    assert!(matches!(err, LabError::Timeout { ms: 200 }), "{err:?}");
}
