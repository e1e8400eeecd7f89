use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use ctg_core::backends::{http_rewrite, BackendConfig, BackendError, RewriteRequest};

struct Seen {
    body: serde_json::Value,
    auth: Option<String>,
}

/// Serves one canned `(status, body)` per incoming connection, then exits.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/rewrite", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = Some(line["authorization:".len()..].trim().to_string());
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Seen {
                body: serde_json::from_slice(&buf).unwrap(),
                auth,
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn request() -> RewriteRequest {
    RewriteRequest {
        prompt: "make it brighter".into(),
        source_text: "the day was grey".into(),
        max_tokens: 64,
        temperature: 0.7,
        request_id: "abc-0-0".into(),
        directives: vec![],
        preserve_unmentioned: true,
    }
}

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        backoff_base_ms: 5,
        timeout_ms: 2_000,
        ..BackendConfig::new(url)
    }
}

#[test]
fn canned_reply_and_wire_format() {
    let (url, seen) = serve(vec![(200, r#"{"text":"the day was bright","id":"abc-0-0"}"#.into())]);
    let cfg = BackendConfig {
        auth_token: Some("s3cret".into()),
        ..config(&url)
    };
    let reply = http_rewrite(&request(), &cfg).unwrap();
    assert_eq!(reply.text, "the day was bright");
    assert_eq!(reply.attempts, 1);
    let req = seen.recv().unwrap();
    assert_eq!(req.body["prompt"], "make it brighter");
    assert_eq!(req.body["source"], "the day was grey");
    assert_eq!(req.body["max_tokens"], 64);
    assert_eq!(req.body["temperature"], 0.7);
    assert_eq!(req.body["id"], "abc-0-0");
    assert_eq!(req.auth.as_deref(), Some("Bearer s3cret"));
}

#[test]
fn retries_server_errors() {
    let ok = r#"{"text":"fine","id":"abc-0-0"}"#.to_string();
    let (url, seen) = serve(vec![(500, "{}".into()), (500, "{}".into()), (200, ok)]);
    let reply = http_rewrite(&request(), &config(&url)).unwrap();
    assert_eq!(reply.text, "fine");
    assert_eq!(reply.attempts, 3);
    assert_eq!(seen.iter().take(3).count(), 3);
}

#[test]
fn gives_up_after_retry_budget() {
    let (url, _seen) = serve(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
    match http_rewrite(&request(), &config(&url)) {
        Err(BackendError::Service { status, attempts }) => {
            assert_eq!(status, 503);
            assert_eq!(attempts, 3);
        }
        other => panic!("expected service error, got {other:?}"),
    }
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(401, "{}".into())]);
    assert!(matches!(
        http_rewrite(&request(), &config(&url)),
        Err(BackendError::Config(_))
    ));
    assert_eq!(seen.iter().count(), 1);
}

#[test]
fn malformed_bodies_name_the_field() {
    let (url, _) = serve(vec![(200, "not json".into())]);
    assert!(matches!(
        http_rewrite(&request(), &config(&url)),
        Err(BackendError::Protocol { .. })
    ));
    let (url, _) = serve(vec![(200, r#"{"id":"abc-0-0"}"#.into())]);
    match http_rewrite(&request(), &config(&url)) {
        Err(BackendError::Protocol { field, .. }) => assert_eq!(field, "text"),
        other => panic!("expected protocol error, got {other:?}"),
    }
    let (url, _) = serve(vec![(200, r#"{"text":"x","id":"other"}"#.into())]);
    match http_rewrite(&request(), &config(&url)) {
        Err(BackendError::Protocol { field, .. }) => assert_eq!(field, "id"),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_times_out_within_budget() {
    // Bind then drop to get a port nobody listens on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = BackendConfig {
        timeout_ms: 200,
        max_retries: 2,
        backoff_base_ms: 10,
        ..BackendConfig::new(format!("http://127.0.0.1:{port}/"))
    };
    let start = Instant::now();
    match http_rewrite(&request(), &cfg) {
        Err(BackendError::Timeout { attempts }) => assert_eq!(attempts, 3),
        other => panic!("expected timeout, got {other:?}"),
    }
    assert!(start.elapsed() <= cfg.time_budget() + Duration::from_millis(500));
}

#[test]
fn config_validation() {
    let cfg = BackendConfig {
        timeout_ms: 0,
        ..BackendConfig::new("http://127.0.0.1:1/")
    };
    assert!(matches!(http_rewrite(&request(), &cfg), Err(BackendError::Config(_))));
}
