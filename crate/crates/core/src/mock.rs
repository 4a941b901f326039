//! Deterministic stand-ins for every external model endpoint.
//!
//! The mock answers the four request shapes the pipeline makes — error
//! annotation, closed-catalog judging, cluster summarization, and code
//! generation — from a fixture file, so offline runs are closed-world and
//! bit-reproducible. Recorded requests (keyed by request hash) replay byte-
//! identically; anything else falls through to a keyword rule engine. The
//! same behavior is usable in-process (it implements the transport traits)
//! or over HTTP via [`MockServer`], which speaks the OpenAI-compatible wire
//! protocol on `/v1/chat/completions` and `/v1/embeddings`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Json, State};
use axum::routing::post;
use axum::Router;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::llm::{
    ChatRequest, ChatTransport, EmbeddingRequest, EmbeddingTransport, LlmError,
};
use crate::taxonomy::{ErrorCategory, ANNOTATION_SYSTEM_PROMPT, JUDGE_SYSTEM_PROMPT};

#[derive(Debug, Error)]
pub enum MockError {
    #[error("failed to bind mock server on port {port}: {source}")]
    Bind {
        port: u16,
        #[source]
        source: std::io::Error,
    },
    #[error("rule pattern {pattern:?} is not a valid regex: {source}")]
    Rule {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("fixture file {path}: {source}")]
    FixtureIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture file {path}: {source}")]
    FixtureFormat {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// One keyword rule: the error fires when `pattern` matches the code and
/// `absent` (if set) does not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub label: String,
    pub category: ErrorCategory,
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent: Option<String>,
}

/// Everything the mock needs to answer requests deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixtures {
    /// Keyword rules applied to annotation and judge requests, in order.
    pub rules: Vec<MockRule>,
    /// Request hash → raw reply, replayed byte-identically.
    #[serde(default)]
    pub canned: BTreeMap<String, String>,
    /// Code snippets cycled through for generation requests.
    #[serde(default)]
    pub generations: Vec<String>,
    /// Dimension of the hash-based embeddings.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

fn default_embedding_dim() -> usize {
    64
}

impl Default for MockFixtures {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            canned: BTreeMap::new(),
            generations: Vec::new(),
            embedding_dim: default_embedding_dim(),
        }
    }
}

impl MockFixtures {
    pub fn load(path: &Path) -> Result<Self, MockError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockError::FixtureIo {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| MockError::FixtureFormat {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), MockError> {
        let text = serde_json::to_string_pretty(self).expect("fixtures serialize");
        std::fs::write(path, text).map_err(|source| MockError::FixtureIo {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Deterministic hash embedding: counts of lowercased character trigrams
/// hashed into `dim` buckets, L2-normalized. Similar wordings share trigrams
/// and land close; the norm is always 1, so vectors are never degenerate.
pub fn embed_text(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
    let mut vector = vec![0.0; dim];
    if padded.len() < 3 {
        vector[0] = 1.0;
        return vector;
    }
    for window in padded.windows(3) {
        let mut hash: u64 = 0xcbf29ce484222325;
        for &ch in window {
            for byte in (ch as u32).to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
        vector[(hash % dim as u64) as usize] += 1.0;
    }
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    vector.iter_mut().for_each(|x| *x /= norm);
    vector
}

struct CompiledRule {
    rule: MockRule,
    pattern: Regex,
    absent: Option<Regex>,
}

enum RequestKind {
    Annotation,
    Judge,
    Summarize,
    Generate,
    Unknown,
}

const SUMMARIZE_PREFIX: &str = "You are an experienced computer science teacher.";
const GENERATE_PREFIX: &str = "You are a student code simulator.";

/// The deterministic model double. Clone-free by design: wrap it in an `Arc`
/// to share between a server and assertions.
pub struct MockBehavior {
    fixtures: MockFixtures,
    rules: Vec<CompiledRule>,
    /// Remaining chat requests to answer with deliberately malformed text.
    fault_budget: Mutex<u64>,
}

impl MockBehavior {
    pub fn new(fixtures: MockFixtures) -> Result<Self, MockError> {
        let rules = fixtures
            .rules
            .iter()
            .map(|rule| {
                let pattern = Regex::new(&rule.pattern).map_err(|source| MockError::Rule {
                    pattern: rule.pattern.clone(),
                    source,
                })?;
                let absent = rule
                    .absent
                    .as_ref()
                    .map(|a| {
                        Regex::new(a).map_err(|source| MockError::Rule {
                            pattern: a.clone(),
                            source,
                        })
                    })
                    .transpose()?;
                Ok(CompiledRule {
                    rule: rule.clone(),
                    pattern,
                    absent,
                })
            })
            .collect::<Result<Vec<_>, MockError>>()?;
        Ok(Self {
            fixtures,
            rules,
            fault_budget: Mutex::new(0),
        })
    }

    /// Answer the next `n` chat requests with non-JSON text, exercising
    /// client retry paths. Embedding requests are unaffected.
    pub fn with_fault_malformed(self, n: u64) -> Self {
        *self.fault_budget.lock().unwrap() = n;
        self
    }

    pub fn fixtures(&self) -> &MockFixtures {
        &self.fixtures
    }

    fn classify(&self, request: &ChatRequest) -> RequestKind {
        let system = request
            .messages
            .first()
            .filter(|m| m.role == "system")
            .map(|m| m.content.as_str())
            .unwrap_or("");
        if system == ANNOTATION_SYSTEM_PROMPT {
            RequestKind::Annotation
        } else if system == JUDGE_SYSTEM_PROMPT {
            RequestKind::Judge
        } else if system.starts_with(SUMMARIZE_PREFIX) {
            RequestKind::Summarize
        } else if system.starts_with(GENERATE_PREFIX) {
            RequestKind::Generate
        } else {
            RequestKind::Unknown
        }
    }

    fn user_content<'a>(&self, request: &'a ChatRequest) -> &'a str {
        request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    fn matching_labels(&self, code: &str) -> Vec<&MockRule> {
        self.rules
            .iter()
            .filter(|compiled| {
                compiled.pattern.is_match(code)
                    && compiled
                        .absent
                        .as_ref()
                        .map(|absent| !absent.is_match(code))
                        .unwrap_or(true)
            })
            .map(|compiled| &compiled.rule)
            .collect()
    }

    fn annotation_reply(&self, user: &str) -> String {
        let code = user
            .split_once("\n\nCode:\n")
            .map(|(_, rest)| rest)
            .unwrap_or(user);
        let errors: Vec<serde_json::Value> = self
            .matching_labels(code)
            .into_iter()
            .map(|rule| {
                json!({
                    "Reasoning": format!("The code matches the pattern for {}.", rule.label),
                    "Category": rule.category.to_string(),
                    "Label": rule.label,
                })
            })
            .collect();
        json!({ "errors": errors }).to_string()
    }

    fn judge_reply(&self, user: &str) -> String {
        let (head, list_text) = match user.rsplit_once("\n\nError list: ") {
            Some(parts) => parts,
            None => (user, "[]"),
        };
        let code = head
            .split_once("\n\nCode: ")
            .map(|(_, rest)| rest)
            .unwrap_or(head);
        let allowed: Vec<String> = serde_json::from_str(list_text.trim()).unwrap_or_default();
        let errors: Vec<&str> = self
            .matching_labels(code)
            .into_iter()
            .map(|rule| rule.label.as_str())
            .filter(|label| allowed.iter().any(|entry| entry == label))
            .collect();
        json!({ "errors": errors }).to_string()
    }

    fn summarize_reply(&self, user: &str) -> String {
        let list_text = user
            .split_once("The error list is: ")
            .map(|(_, rest)| rest)
            .unwrap_or(user);
        let list_text = list_text
            .split_once("\n\nNow follow")
            .map(|(head, _)| head)
            .unwrap_or(list_text);
        let members: Vec<String> = serde_json::from_str(list_text.trim()).unwrap_or_default();
        // Most frequent member wins; ties go to the shortest, then
        // lexicographically smallest, so the choice is deterministic.
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for member in &members {
            *counts.entry(member.as_str()).or_insert(0) += 1;
        }
        let representative = counts
            .iter()
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb)
                    .then_with(|| b.len().cmp(&a.len()))
                    .then_with(|| b.cmp(a))
            })
            .map(|(member, _)| (*member).to_string())
            .unwrap_or_default();
        json!({
            "Reasoning": "The chosen description is the most common and concise wording in the list.",
            "Representative_error": representative,
        })
        .to_string()
    }

    fn generation(&self, request: &ChatRequest, choice: usize) -> String {
        if self.fixtures.generations.is_empty() {
            return "int answer() { return 0; }".to_string();
        }
        let hash = request.request_hash();
        let base = u64::from_str_radix(&hash[..8], 16).expect("hash is hex") as usize;
        let index = (base + choice) % self.fixtures.generations.len();
        self.fixtures.generations[index].clone()
    }

    fn reply(&self, request: &ChatRequest, choice: usize) -> String {
        let user = self.user_content(request);
        match self.classify(request) {
            RequestKind::Annotation => self.annotation_reply(user),
            RequestKind::Judge => self.judge_reply(user),
            RequestKind::Summarize => self.summarize_reply(user),
            RequestKind::Generate => self.generation(request, choice),
            RequestKind::Unknown => json!({ "error": "unrecognized request shape" }).to_string(),
        }
    }
}

impl ChatTransport for MockBehavior {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<String>, LlmError> {
        {
            let mut budget = self.fault_budget.lock().unwrap();
            if *budget > 0 {
                *budget -= 1;
                return Ok(vec![
                    "The code seems to contain several issues; let me think about this."
                        .to_string(),
                ]);
            }
        }
        if let Some(canned) = self.fixtures.canned.get(&request.request_hash()) {
            return Ok(vec![canned.clone()]);
        }
        let n = request.n.unwrap_or(1).max(1) as usize;
        Ok((0..n).map(|choice| self.reply(request, choice)).collect())
    }
}

impl EmbeddingTransport for MockBehavior {
    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f64>>, LlmError> {
        Ok(request
            .input
            .iter()
            .map(|text| embed_text(text, self.fixtures.embedding_dim))
            .collect())
    }
}

async fn chat_handler(
    State(behavior): State<Arc<MockBehavior>>,
    Json(request): Json<ChatRequest>,
) -> Json<serde_json::Value> {
    let contents = behavior
        .chat(&request)
        .expect("mock chat never fails");
    let choices: Vec<serde_json::Value> = contents
        .iter()
        .enumerate()
        .map(|(index, content)| {
            json!({
                "index": index,
                "message": { "role": "assistant", "content": content },
                "finish_reason": "stop",
            })
        })
        .collect();
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "model": request.model,
        "choices": choices,
    }))
}

async fn embed_handler(
    State(behavior): State<Arc<MockBehavior>>,
    Json(request): Json<EmbeddingRequest>,
) -> Json<serde_json::Value> {
    let vectors = behavior
        .embed(&request)
        .expect("mock embedding never fails");
    let data: Vec<serde_json::Value> = vectors
        .iter()
        .enumerate()
        .map(|(index, embedding)| json!({ "index": index, "embedding": embedding }))
        .collect();
    Json(json!({ "object": "list", "model": request.model, "data": data }))
}

fn router(behavior: Arc<MockBehavior>) -> Router {
    Router::new()
        .route("/chat/completions", post(chat_handler))
        .route("/v1/chat/completions", post(chat_handler))
        .route("/embeddings", post(embed_handler))
        .route("/v1/embeddings", post(embed_handler))
        .with_state(behavior)
}

/// A running mock endpoint. Shuts down when dropped.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

/// Binds `port` (0 picks a free one) on localhost and serves `behavior` from
/// a background thread.
pub fn serve(behavior: Arc<MockBehavior>, port: u16) -> Result<MockServer, MockError> {
    let listener = std::net::TcpListener::bind(("127.0.0.1", port))
        .map_err(|source| MockError::Bind { port, source })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| MockError::Bind { port, source })?;
    let addr = listener
        .local_addr()
        .map_err(|source| MockError::Bind { port, source })?;
    let (shutdown_tx, shutdown_rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime builds");
        runtime.block_on(async move {
            let listener =
                tokio::net::TcpListener::from_std(listener).expect("listener converts");
            axum::serve(listener, router(behavior))
                .with_graceful_shutdown(async {
                    shutdown_rx.await.ok();
                })
                .await
                .expect("mock server runs");
        });
    });
    Ok(MockServer {
        addr,
        shutdown: Some(shutdown_tx),
        thread: Some(thread),
    })
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL clients should configure, e.g. `http://127.0.0.1:49521/v1`.
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            tx.send(()).ok();
        }
        if let Some(thread) = self.thread.take() {
            thread.join().ok();
        }
    }
}
