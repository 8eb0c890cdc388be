use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use dpicl_core::llm_client::*;

type Scripted = Result<HttpReply, TransportFailure>;

/// Replies from a fixed script and records what it was sent.
struct ScriptedTransport {
    replies: Mutex<VecDeque<Scripted>>,
    seen: Mutex<Vec<(String, Option<String>, serde_json::Value)>>,
}

impl ScriptedTransport {
    fn new(replies: Vec<Scripted>) -> Self {
        Self { replies: Mutex::new(replies.into()), seen: Mutex::new(vec![]) }
    }
}

impl Transport for &ScriptedTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str, _timeout: Duration) -> Scripted {
        self.seen.lock().unwrap().push((url.into(), bearer.map(str::to_string), serde_json::from_str(body).unwrap()));
        self.replies.lock().unwrap().pop_front().expect("script exhausted")
    }
}

fn ok(text: &str) -> Scripted {
    Ok(HttpReply {
        status: 200,
        body: serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] }).to_string(),
    })
}

fn status(code: u16) -> Scripted {
    Ok(HttpReply { status: code, body: format!("status {code}") })
}

fn request() -> ChatRequest {
    ChatRequest { model: "m".into(), prompt: "hello".into(), temperature: 0.0, max_tokens: 8, query_id: 3, shard: 1 }
}

fn client(t: &ScriptedTransport) -> ChatClient<&ScriptedTransport> {
    let endpoint = EndpointConfig { base_url: "http://llm.test/".into(), ..EndpointConfig::default() };
    ChatClient::new(endpoint, t, RetryPolicy { base_delay: Duration::from_millis(1), ..RetryPolicy::default() })
        .with_sleeper(|_| {})
}

#[test]
fn success_takes_one_attempt() {
    let t = ScriptedTransport::new(vec![ok("Sports")]);
    let resp = client(&t).with_api_key("k").complete(&request()).unwrap();
    assert_eq!(resp.text, "Sports");
    assert_eq!(resp.attempt_count, 1);
    let seen = t.seen.lock().unwrap();
    assert_eq!(seen[0].0, "http://llm.test/v1/chat/completions");
    assert_eq!(seen[0].1.as_deref(), Some("k"));
    assert_eq!(seen[0].2["messages"][0]["content"], "hello");
    assert_eq!(seen[0].2["max_tokens"], 8);
}

#[test]
fn rate_limits_are_retried() {
    let t = ScriptedTransport::new(vec![status(429), status(429), ok("x")]);
    let resp = client(&t).complete(&request()).unwrap();
    assert_eq!(resp.attempt_count, 3);
}

#[test]
fn server_errors_are_retried() {
    let t = ScriptedTransport::new(vec![status(503), Err(TransportFailure::Connect("refused".into())), ok("x")]);
    assert_eq!(client(&t).complete(&request()).unwrap().attempt_count, 3);
}

#[test]
fn repeated_timeouts_exhaust_retries() {
    let t = ScriptedTransport::new((0..5).map(|_| Err(TransportFailure::Timeout)).collect());
    let err = client(&t).complete(&request()).unwrap_err();
    match &err {
        LlmError::Transport { query_id, shard, attempts, .. } => {
            assert_eq!((*query_id, *shard, *attempts), (3, 1, 5));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.is_transport());
    assert_eq!(t.seen.lock().unwrap().len(), 5);
}

#[test]
fn client_errors_fail_immediately() {
    let t = ScriptedTransport::new(vec![status(400), ok("never")]);
    let err = client(&t).complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Client { status: 400, .. }));
    assert_eq!(t.seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_a_protocol_error() {
    let t = ScriptedTransport::new(vec![Ok(HttpReply { status: 200, body: "{}".into() })]);
    assert!(matches!(client(&t).complete(&request()), Err(LlmError::Protocol { .. })));
}

#[test]
fn backoff_grows_geometrically() {
    let policy = RetryPolicy::default();
    assert_eq!(policy.backoff_ceiling(1), Duration::from_secs(1));
    assert_eq!(policy.backoff_ceiling(3), Duration::from_secs(4));
}

#[test]
fn trace_records_every_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let t = ScriptedTransport::new(vec![status(500), ok("x")]);
    client(&t).with_trace(&path).unwrap().complete(&request()).unwrap();
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["status"], 500);
    assert_eq!(lines[1]["attempt"], 2);
}

#[test]
fn batch_preserves_order_under_parallelism() {
    let requests: Vec<ChatRequest> = (0..20)
        .map(|i| ChatRequest { prompt: format!("Read the text: t{i}\nAnswer the question with at most 4 words: q\nDo not provide a Yes/No answer:"), shard: i, ..request() })
        .collect();
    let model = MockLlm::new(MockBehavior::FixedText("same".into()));
    let out = complete_batch(&model, &requests, 4);
    assert_eq!(out.len(), 20);
    assert!(out.iter().all(|r| r.as_ref().unwrap().text == "same"));
}
