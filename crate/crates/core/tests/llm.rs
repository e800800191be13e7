use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use hdlagent::llm::{
    BackendSpec, ChatBackend, ChatMessage, ChatRequest, HttpSpec, LlmError, ReplayFallback, RetryPolicy,
    Rule, Script, ScriptedBackend,
};

/// A one-route HTTP server. `respond(n)` answers the n-th request (0-based).
struct Stub {
    url: String,
    hits: Arc<AtomicUsize>,
    requests: Arc<Mutex<Vec<(String, String)>>>,
}

fn stub(respond: impl Fn(usize) -> (u16, String) + Send + 'static) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let requests = Arc::new(Mutex::new(Vec::new()));
    let (h, r) = (hits.clone(), requests.clone());
    thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(mut conn) = conn else { continue };
            let mut reader = BufReader::new(conn.try_clone().unwrap());
            let mut headers = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                headers.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            r.lock().unwrap().push((headers, String::from_utf8_lossy(&body).into_owned()));
            let n = h.fetch_add(1, Ordering::SeqCst);
            let (status, text) = respond(n);
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = conn.write_all(reply.as_bytes());
        }
    });
    Stub { url, hits, requests }
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 11, "completion_tokens": 3}
    })
    .to_string()
}

fn spec(url: &str, max_retries: u32) -> HttpSpec {
    serde_json::from_value(serde_json::json!({"base_url": url, "model": "stub-model"})).map(|mut s: HttpSpec| {
        s.retry = RetryPolicy {
            max_retries,
            base_backoff: 0.01,
            max_backoff: 0.05,
        };
        s
    })
    .unwrap()
}

fn request(text: &str) -> ChatRequest {
    ChatRequest::new("generator", vec![ChatMessage::system("be terse"), ChatMessage::user(text)], 1.2)
}

#[test]
fn scripted_catch_all_returns_the_exact_text() {
    let text = "```verilog\nmodule m; endmodule\n```";
    let b = ScriptedBackend::new(Script::new(vec![Rule::reply(text)]), 0).unwrap();
    assert_eq!(b.complete(&request("anything")).unwrap().content, text);
    assert_eq!(b.complete(&request("else")).unwrap().content, text);
}

#[test]
fn empty_cassette_misses() {
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("c.jsonl");
    std::fs::write(&cassette, "").unwrap();
    let b = BackendSpec::Replay { cassette, fallback: ReplayFallback::Error }.build(0).unwrap();
    assert!(matches!(b.complete(&request("x")), Err(LlmError::CassetteMiss(_))));
}

#[test]
fn http_retries_then_succeeds() {
    let s = stub(|n| if n < 2 { (500, "{}".into()) } else { (200, completion("ok")) });
    let b = BackendSpec::Http(spec(&s.url, 3)).build(0).unwrap();
    let r = b.complete(&request("hello")).unwrap();
    assert_eq!(r.content, "ok");
    assert_eq!(s.hits.load(Ordering::SeqCst), 3);
    assert_eq!(r.token_usage.unwrap().prompt_tokens, 11);
    assert_eq!(r.backend_id, "http:stub-model");

    let (_, body) = s.requests.lock().unwrap()[2].clone();
    let body: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(body["model"], "stub-model");
    assert_eq!(body["temperature"], 1.2);
    assert_eq!(body["messages"][1]["content"], "hello");
    assert_eq!(body["messages"][0]["role"], "system");
}

#[test]
fn http_attempts_never_exceed_the_retry_budget() {
    for max_retries in [0, 1, 3] {
        let s = stub(|_| (503, "busy".into()));
        let b = BackendSpec::Http(spec(&s.url, max_retries)).build(0).unwrap();
        match b.complete(&request("x")) {
            Err(LlmError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, max_retries + 1),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.hits.load(Ordering::SeqCst), max_retries as usize + 1);
    }
}

#[test]
fn http_client_errors_are_not_retried() {
    let s = stub(|_| (400, "bad".into()));
    let b = BackendSpec::Http(spec(&s.url, 3)).build(0).unwrap();
    assert!(matches!(b.complete(&request("x")), Err(LlmError::Status { status: 400, .. })));
    assert_eq!(s.hits.load(Ordering::SeqCst), 1);

    let s = stub(|_| (200, r#"{"choices": []}"#.into()));
    let b = BackendSpec::Http(spec(&s.url, 3)).build(0).unwrap();
    assert!(matches!(b.complete(&request("x")), Err(LlmError::MalformedResponse { .. })));
}

#[test]
fn http_auth_and_response_pointer() {
    let s = stub(|_| (200, r#"{"output": {"text": "hi"}}"#.into()));
    let mut sp = spec(&s.url, 0);
    sp.auth_env = Some("HDLAGENT_LLM_TEST_TOKEN".into());
    sp.response_pointer = "/output/text".into();
    let b = BackendSpec::Http(sp.clone()).build(0).unwrap();

    std::env::remove_var("HDLAGENT_LLM_TEST_TOKEN");
    assert!(matches!(b.complete(&request("x")), Err(LlmError::AuthMissing(_))));
    assert_eq!(s.hits.load(Ordering::SeqCst), 0);

    std::env::set_var("HDLAGENT_LLM_TEST_TOKEN", "sekrit");
    assert_eq!(b.complete(&request("x")).unwrap().content, "hi");
    let (headers, _) = s.requests.lock().unwrap()[0].clone();
    assert!(headers.to_ascii_lowercase().contains("authorization: bearer sekrit"), "{headers}");
}

#[test]
fn cassette_recorded_over_http_replays_without_the_server() {
    let dir = tempfile::tempdir().unwrap();
    let cassette = dir.path().join("session.jsonl");
    let s = stub(|n| (200, completion(&format!("reply {n}"))));
    let record = BackendSpec::Replay {
        cassette: cassette.clone(),
        fallback: ReplayFallback::Record { delegate: Box::new(BackendSpec::Http(spec(&s.url, 0))) },
    };
    let prompts = ["a", "b", "a", "c"];
    let recorder = record.build(4).unwrap();
    let live: Vec<String> = prompts.iter().map(|p| recorder.complete(&request(p)).unwrap().content).collect();
    assert_eq!(s.hits.load(Ordering::SeqCst), 4);
    drop(recorder);

    let replay = BackendSpec::Replay { cassette, fallback: ReplayFallback::Error }.build(4).unwrap();
    let again: Vec<String> = prompts.iter().map(|p| replay.complete(&request(p)).unwrap().content).collect();
    assert_eq!(again, live);
    assert_eq!(s.hits.load(Ordering::SeqCst), 4);
    assert!(matches!(replay.complete(&request("never asked")), Err(LlmError::CassetteMiss(_))));
}
