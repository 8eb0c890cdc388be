//! Prompt rendering, an OpenAI-compatible chat-completions client, and
//! deterministic mock models.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::mechanisms::Tokenizer;

pub const API_KEY_ENV: &str = "DPICL_API_KEY";

const CLASSIFY_INSTRUCTION: &str = "Instruction: Classify each article into one of the following categories separated by comma: ";
const ARTICLE: &str = "Article: ";
const CLASS_SEP: &str = ", Class: ";
const CLASS_TAIL: &str = ", Class:";
const READ_TEXT: &str = "Read the text: ";
const ASK: &str = "Answer the question with at most 4 words: ";
const ANSWER_LINE: &str = "Do not provide a Yes/No answer:";
const KEYWORD_LINE: &str = "Using the following keywords, answer the question concisely: ";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid prompt parameters: {0}")]
    Prompt(String),
    #[error("query {query_id} shard {shard}: transport failed after {attempts} attempts: {last_error}")]
    Transport { query_id: u64, shard: usize, attempts: u32, last_error: String },
    #[error("query {query_id} shard {shard}: endpoint rejected request with status {status}: {body}")]
    Client { query_id: u64, shard: usize, status: u16, body: String },
    #[error("query {query_id} shard {shard}: malformed response: {reason}")]
    Protocol { query_id: u64, shard: usize, reason: String },
    #[error("mock model cannot parse prompt: {0}")]
    Mock(String),
}

impl LlmError {
    pub fn is_transport(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::Client { .. } | LlmError::Protocol { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Classification,
    Qa,
    QaKeywordFollowup,
    ZeroShot,
}

fn sanitize(slot: &str) -> String {
    slot.replace("\r\n", " ").replace(['\n', '\r'], " ")
}

/// Few-shot classification prompt; no demos gives the zero-shot form.
pub fn render_classification_prompt<S: AsRef<str>>(
    classes: &[S],
    demos: &[(&str, &str)],
    query: &str,
) -> Result<String, LlmError> {
    if classes.is_empty() {
        return Err(LlmError::Prompt("class list is empty".into()));
    }
    let class_list: Vec<String> = classes.iter().map(|c| sanitize(c.as_ref())).collect();
    let mut lines = Vec::with_capacity(demos.len() + 2);
    lines.push(format!("{CLASSIFY_INSTRUCTION}{}.", class_list.join(", ")));
    for (text, label) in demos {
        lines.push(format!("{ARTICLE}{}{CLASS_SEP}{}", sanitize(text), sanitize(label)));
    }
    lines.push(format!("{ARTICLE}{}{CLASS_TAIL}", sanitize(query)));
    Ok(lines.join("\n"))
}

fn qa_block(text: &str, question: &str, answer: Option<&str>) -> String {
    let last = match answer {
        Some(a) => format!("{ANSWER_LINE} {}", sanitize(a)),
        None => ANSWER_LINE.to_string(),
    };
    format!("{READ_TEXT}{}\n{ASK}{}\n{last}", sanitize(text), sanitize(question))
}

/// Few-shot QA prompt: one block per demo, then the open query block.
pub fn render_qa_prompt(demos: &[(&str, &str, &str)], query: (&str, &str)) -> Result<String, LlmError> {
    if query.0.trim().is_empty() && query.1.trim().is_empty() {
        return Err(LlmError::Prompt("query is empty".into()));
    }
    let mut blocks: Vec<String> = demos.iter().map(|(t, q, a)| qa_block(t, q, Some(a))).collect();
    blocks.push(qa_block(query.0, query.1, None));
    Ok(blocks.join("\n\n"))
}

/// Zero-shot follow-up that asks for an answer built from released keywords.
pub fn render_keyword_followup<S: AsRef<str>>(keywords: &[S], query: (&str, &str)) -> Result<String, LlmError> {
    if keywords.is_empty() {
        return Err(LlmError::Prompt("no keywords to embed".into()));
    }
    let list: Vec<String> = keywords.iter().map(|k| sanitize(k.as_ref())).collect();
    Ok(format!(
        "{READ_TEXT}{}\n{ASK}{}\n{KEYWORD_LINE}{}.",
        sanitize(query.0),
        sanitize(query.1),
        list.join(", ")
    ))
}

/// First line of the response, trimmed.
pub fn extract_qa_answer(response: &str) -> String {
    response.trim().lines().next().unwrap_or("").trim().to_string()
}

/// Longest class name that is a case-insensitive prefix of the trimmed
/// response.
pub fn extract_class_label<S: AsRef<str>>(response: &str, classes: &[S]) -> Option<String> {
    let folded = response.trim().to_lowercase();
    classes
        .iter()
        .map(AsRef::as_ref)
        .filter(|c| !c.is_empty() && folded.starts_with(&c.to_lowercase()))
        .max_by_key(|c| c.len())
        .map(str::to_string)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub query_id: u64,
    pub shard: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

pub trait LanguageModel: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// Completes `requests` with at most `max_parallel` in flight; results come
/// back in request order.
pub fn complete_batch(
    model: &dyn LanguageModel,
    requests: &[ChatRequest],
    max_parallel: usize,
) -> Vec<Result<ChatResponse, LlmError>> {
    let workers = max_parallel.clamp(1, requests.len().max(1));
    if workers == 1 {
        return requests.iter().map(|r| model.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ChatResponse, LlmError>>>> = requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(request) = requests.get(i) else { break };
                let result = model.complete(request);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

// ---------------------------------------------------------------------------
// HTTP client

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Shard requests in flight per query; defaults to the shard count.
    #[serde(default)]
    pub max_parallel: Option<usize>,
    #[serde(default)]
    pub trace_path: Option<PathBuf>,
}

fn default_max_tokens() -> u32 {
    32
}

fn default_timeout_secs() -> u64 {
    60
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000".into(),
            model: "local".into(),
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            max_parallel: None,
            trace_path: None,
        }
    }
}

/// Exponential backoff with full jitter: before retry `n` (1-based) sleep a
/// uniform draw from `[0, base * factor^(n-1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base_delay: Duration::from_secs(1), factor: 2.0, max_attempts: 5 }
    }
}

impl RetryPolicy {
    pub fn backoff_ceiling(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry.saturating_sub(1) as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportFailure {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("{0}")]
    Other(String),
}

/// Sends one JSON POST.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str, timeout: Duration) -> Result<HttpReply, TransportFailure>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| LlmError::Prompt(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str, timeout: Duration) -> Result<HttpReply, TransportFailure> {
        let mut request = self
            .client
            .post(url)
            .timeout(timeout)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(token) = bearer {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                TransportFailure::Timeout
            } else if e.is_connect() {
                TransportFailure::Connect(e.to_string())
            } else {
                TransportFailure::Other(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                TransportFailure::Timeout
            } else {
                TransportFailure::Other(e.to_string())
            }
        })?;
        Ok(HttpReply { status, body })
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Chat-completions client with retries on timeouts, 429 and 5xx.
pub struct ChatClient<T: Transport> {
    endpoint: EndpointConfig,
    transport: T,
    retry: RetryPolicy,
    api_key: Option<String>,
    sleeper: Sleeper,
    trace: Option<Mutex<BufWriter<File>>>,
}

impl ChatClient<HttpTransport> {
    /// HTTP client authenticated from `DPICL_API_KEY` when set.
    pub fn from_env(endpoint: EndpointConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let mut client = Self::new(endpoint, HttpTransport::new()?, RetryPolicy::default());
        client.api_key = api_key;
        Ok(client)
    }
}

impl<T: Transport> ChatClient<T> {
    pub fn new(endpoint: EndpointConfig, transport: T, retry: RetryPolicy) -> Self {
        Self { endpoint, transport, retry, api_key: None, sleeper: Arc::new(std::thread::sleep), trace: None }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    /// Appends one JSON line per attempt to `path`.
    pub fn with_trace(mut self, path: &std::path::Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.trace = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn endpoint(&self) -> &EndpointConfig {
        &self.endpoint
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn log(&self, entry: serde_json::Value) {
        if let Some(trace) = &self.trace {
            let mut w = trace.lock().expect("trace lock");
            // tracing is best effort
            let _ = writeln!(w, "{entry}").and_then(|_| w.flush());
        }
    }
}

/// Request body for one prompt.
pub fn chat_payload(request: &ChatRequest) -> serde_json::Value {
    json!({
        "model": request.model,
        "messages": [{ "role": "user", "content": request.prompt }],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

fn parse_completion(body: &str) -> Result<String, String> {
    let value: serde_json::Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| "missing choices[0].message.content".to_string())
}

impl<T: Transport> LanguageModel for ChatClient<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        if request.prompt.is_empty() {
            return Err(LlmError::Prompt("prompt is empty".into()));
        }
        let (query_id, shard) = (request.query_id, request.shard);
        let body = chat_payload(request).to_string();
        let url = self.url();
        let timeout = Duration::from_secs(self.endpoint.timeout_secs);
        let started = Instant::now();
        let mut last_error = String::new();
        let max_attempts = self.retry.max_attempts.max(1);
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let ceiling = self.retry.backoff_ceiling(attempt - 1);
                let wait = ceiling.mul_f64(rand::rng().random::<f64>());
                (self.sleeper)(wait);
            }
            let outcome = self.transport.post_json(&url, self.api_key.as_deref(), &body, timeout);
            match outcome {
                Ok(HttpReply { status, body: reply }) if (200..300).contains(&status) => {
                    self.log(json!({ "query_id": query_id, "shard": shard, "attempt": attempt, "status": status, "prompt": request.prompt, "response": reply }));
                    let text = parse_completion(&reply)
                        .map_err(|reason| LlmError::Protocol { query_id, shard, reason })?;
                    return Ok(ChatResponse { text, latency: started.elapsed(), attempt_count: attempt });
                }
                Ok(HttpReply { status, body: reply }) => {
                    self.log(json!({ "query_id": query_id, "shard": shard, "attempt": attempt, "status": status, "prompt": request.prompt, "error": reply }));
                    if status == 429 || status >= 500 {
                        last_error = format!("status {status}");
                    } else {
                        return Err(LlmError::Client { query_id, shard, status, body: reply });
                    }
                }
                Err(failure) => {
                    self.log(json!({ "query_id": query_id, "shard": shard, "attempt": attempt, "prompt": request.prompt, "error": failure.to_string() }));
                    last_error = failure.to_string();
                }
            }
        }
        Err(LlmError::Transport { query_id, shard, attempts: max_attempts, last_error })
    }
}

// ---------------------------------------------------------------------------
// Mocks

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockBehavior {
    /// Most frequent demonstration label or answer; ties to the
    /// lexicographically smallest.
    MajorityLabel,
    /// Released keywords for follow-up prompts, otherwise every demo
    /// answer's tokens in order.
    KeywordEcho,
    FixedText(String),
}

/// Demonstration outputs and keywords recovered from a rendered prompt.
#[derive(Debug, Default, PartialEq)]
struct ParsedPrompt {
    demo_outputs: Vec<String>,
    keywords: Vec<String>,
}

fn parse_classification(lines: &[&str]) -> Result<ParsedPrompt, LlmError> {
    let (query, demos) = lines[1..].split_last().ok_or_else(|| LlmError::Mock("missing query line".into()))?;
    if !(query.starts_with(ARTICLE) && query.ends_with(CLASS_TAIL)) {
        return Err(LlmError::Mock(format!("bad query line: {query:?}")));
    }
    let demo_outputs = demos
        .iter()
        .map(|line| {
            line.strip_prefix(ARTICLE)
                .and_then(|rest| rest.rfind(CLASS_SEP).map(|i| rest[i + CLASS_SEP.len()..].to_string()))
                .ok_or_else(|| LlmError::Mock(format!("bad demonstration line: {line:?}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(ParsedPrompt { demo_outputs, keywords: vec![] })
}

fn parse_qa(prompt: &str) -> Result<ParsedPrompt, LlmError> {
    let blocks: Vec<&str> = prompt.split("\n\n").collect();
    let (query, demos) = blocks.split_last().expect("split yields one block");
    let mut parsed = ParsedPrompt::default();
    for block in demos {
        let lines: Vec<&str> = block.lines().collect();
        match lines.as_slice() {
            [t, q, a] if t.starts_with(READ_TEXT) && q.starts_with(ASK) && a.starts_with(ANSWER_LINE) => {
                parsed.demo_outputs.push(a[ANSWER_LINE.len()..].trim().to_string());
            }
            _ => return Err(LlmError::Mock(format!("bad demonstration block: {block:?}"))),
        }
    }
    let lines: Vec<&str> = query.lines().collect();
    match lines.as_slice() {
        [t, q, a] if t.starts_with(READ_TEXT) && q.starts_with(ASK) && *a == ANSWER_LINE => {}
        [t, q, k] if t.starts_with(READ_TEXT) && q.starts_with(ASK) && k.starts_with(KEYWORD_LINE) && demos.is_empty() => {
            let list = k[KEYWORD_LINE.len()..].trim_end_matches('.');
            parsed.keywords = list.split(", ").map(str::to_string).collect();
        }
        _ => return Err(LlmError::Mock(format!("bad query block: {query:?}"))),
    }
    Ok(parsed)
}

fn parse_prompt(prompt: &str) -> Result<ParsedPrompt, LlmError> {
    let lines: Vec<&str> = prompt.lines().collect();
    match lines.first() {
        Some(first) if first.starts_with(CLASSIFY_INSTRUCTION) => parse_classification(&lines),
        Some(first) if first.starts_with(READ_TEXT) => parse_qa(prompt),
        _ => Err(LlmError::Mock("prompt matches no known template".into())),
    }
}

/// Deterministic stand-in for an LLM.
pub fn mock_llm(behavior: &MockBehavior, prompt: &str) -> Result<String, LlmError> {
    if let MockBehavior::FixedText(text) = behavior {
        return Ok(text.clone());
    }
    let parsed = parse_prompt(prompt)?;
    match behavior {
        MockBehavior::MajorityLabel => {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for label in &parsed.demo_outputs {
                *counts.entry(label.as_str()).or_insert(0) += 1;
            }
            // BTreeMap iterates in lexicographic order; keep the first maximum
            let mut best: Option<(&str, usize)> = None;
            for (label, count) in counts {
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((label, count));
                }
            }
            Ok(best.map(|(l, _)| l.to_string()).unwrap_or_default())
        }
        MockBehavior::KeywordEcho => {
            if !parsed.keywords.is_empty() {
                return Ok(parsed.keywords.join(" "));
            }
            let tokens: Vec<String> =
                parsed.demo_outputs.iter().flat_map(|a| Tokenizer::SURFACE.tokenize(a)).collect();
            Ok(tokens.join(" "))
        }
        MockBehavior::FixedText(_) => unreachable!("handled above"),
    }
}

/// A [`LanguageModel`] that answers with [`mock_llm`] and never touches the
/// network.
#[derive(Debug, Clone)]
pub struct MockLlm {
    pub behavior: MockBehavior,
}

impl MockLlm {
    pub fn new(behavior: MockBehavior) -> Self {
        Self { behavior }
    }
}

impl LanguageModel for MockLlm {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let text = mock_llm(&self.behavior, &request.prompt)?;
        Ok(ChatResponse { text, latency: Duration::ZERO, attempt_count: 1 })
    }
}
