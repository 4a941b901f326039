//! Client plumbing for OpenAI-compatible chat endpoints.
//!
//! Every component that talks to a model — the error judge, the cluster
//! summarizer, the remote policy sampler — goes through the [`ChatTransport`]
//! trait, so tests can substitute canned or rule-based transports and the HTTP
//! path stays in one place. The transport performs exactly one request per
//! call; retry policies belong to the callers, which know what "malformed"
//! means for their reply schema.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("reply contained no usable choices")]
    EmptyReply,
    #[error("embedding reply carried {got} vectors for {expected} inputs")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Fault(String),
}

/// One message in a chat exchange. `role` is `"system"`, `"user"`, or
/// `"assistant"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".to_string(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".to_string(), content: content.into() }
    }
}

/// Body of a chat-completions request. Optional fields are omitted from the
/// serialized JSON when unset, matching what real endpoints expect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// vLLM-style extension; plain OpenAI endpoints ignore it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: None,
            top_p: None,
            max_tokens: None,
            n: None,
            seed: None,
            top_k: None,
            logprobs: None,
        }
    }

    /// Content hash of the serialized request body. Stable across runs because
    /// struct field order fixes the JSON key order.
    pub fn request_hash(&self) -> String {
        let body = serde_json::to_string(self).expect("chat request serializes");
        sha256_hex(body.as_bytes())
    }
}

/// Anything that can answer a chat request: the HTTP client below, the
/// in-process mock, or a test closure. One call, one request; no retries.
pub trait ChatTransport: Send + Sync {
    /// Returns the assistant content of every choice, in choice order.
    fn chat(&self, request: &ChatRequest) -> Result<Vec<String>, LlmError>;
}

impl<F> ChatTransport for F
where
    F: Fn(&ChatRequest) -> Result<Vec<String>, LlmError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<Vec<String>, LlmError> {
        self(request)
    }
}

/// One sampled token with its log-probability under the producing model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// One choice from a chat reply, with token-level log-probabilities when the
/// endpoint supplied them.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatChoice {
    pub content: String,
    pub logprobs: Option<Vec<TokenLogprob>>,
}

/// A transport that preserves per-token log-probabilities. Needed by policy
/// sampling, where the ratio math is undefined without scores; everything
/// else can stay on the plain [`ChatTransport`].
pub trait DetailedChatTransport: Send + Sync {
    fn chat_detailed(&self, request: &ChatRequest) -> Result<Vec<ChatChoice>, LlmError>;
}

impl<F> DetailedChatTransport for F
where
    F: Fn(&ChatRequest) -> Result<Vec<ChatChoice>, LlmError> + Send + Sync,
{
    fn chat_detailed(&self, request: &ChatRequest) -> Result<Vec<ChatChoice>, LlmError> {
        self(request)
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

/// Blocking HTTP transport for OpenAI-compatible endpoints. The configured
/// endpoint is the base URL (e.g. `http://127.0.0.1:8080/v1`); the transport
/// appends `/chat/completions`.
pub struct HttpChatTransport {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatTransport {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key: None,
            client,
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.endpoint)
    }
}

impl DetailedChatTransport for HttpChatTransport {
    fn chat_detailed(&self, request: &ChatRequest) -> Result<Vec<ChatChoice>, LlmError> {
        let mut builder = self.client.post(self.completions_url()).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send()?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(LlmError::Endpoint { status: status.as_u16(), body });
        }
        let wire: WireResponse = response.json()?;
        if wire.choices.is_empty() {
            return Err(LlmError::EmptyReply);
        }
        wire.choices
            .into_iter()
            .map(|choice| {
                let content = choice.message.content.ok_or(LlmError::EmptyReply)?;
                Ok(ChatChoice {
                    content,
                    logprobs: choice.logprobs.and_then(|lp| lp.content),
                })
            })
            .collect()
    }
}

impl ChatTransport for HttpChatTransport {
    fn chat(&self, request: &ChatRequest) -> Result<Vec<String>, LlmError> {
        Ok(self
            .chat_detailed(request)?
            .into_iter()
            .map(|choice| choice.content)
            .collect())
    }
}

/// Body of an embeddings request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRequest {
    pub model: String,
    pub input: Vec<String>,
}

impl EmbeddingRequest {
    pub fn new(model: impl Into<String>, input: Vec<String>) -> Self {
        Self { model: model.into(), input }
    }
}

/// Anything that can embed a batch of texts. Returns one vector per input, in
/// input order.
pub trait EmbeddingTransport: Send + Sync {
    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f64>>, LlmError>;
}

impl<F> EmbeddingTransport for F
where
    F: Fn(&EmbeddingRequest) -> Result<Vec<Vec<f64>>, LlmError> + Send + Sync,
{
    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f64>>, LlmError> {
        self(request)
    }
}

#[derive(Deserialize)]
struct EmbedWireResponse {
    data: Vec<EmbedWireItem>,
}

#[derive(Deserialize)]
struct EmbedWireItem {
    index: usize,
    embedding: Vec<f64>,
}

/// Blocking HTTP transport for OpenAI-compatible embedding endpoints; appends
/// `/embeddings` to the configured base URL.
pub struct HttpEmbeddingTransport {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingTransport {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key: None,
            client,
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }
}

impl EmbeddingTransport for HttpEmbeddingTransport {
    fn embed(&self, request: &EmbeddingRequest) -> Result<Vec<Vec<f64>>, LlmError> {
        let url = format!("{}/embeddings", self.endpoint);
        let mut builder = self.client.post(url).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send()?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(LlmError::Endpoint { status: status.as_u16(), body });
        }
        let wire: EmbedWireResponse = response.json()?;
        if wire.data.len() != request.input.len() {
            return Err(LlmError::ShapeMismatch {
                expected: request.input.len(),
                got: wire.data.len(),
            });
        }
        let mut items = wire.data;
        items.sort_by_key(|item| item.index);
        Ok(items.into_iter().map(|item| item.embedding).collect())
    }
}

/// Applies `f` to every item using at most `max_parallel` worker threads and
/// returns the results in input order. Workers pull indices from a shared
/// cursor, so a slow item never blocks unrelated ones, and the output order is
/// independent of scheduling.
pub fn map_bounded<T, R, F>(items: &[T], max_parallel: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    assert!(max_parallel >= 1, "max_parallel must be at least 1");
    if items.is_empty() {
        return Vec::new();
    }
    let workers = max_parallel.min(items.len());
    let cursor = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let cursor = &cursor;
                let f = &f;
                scope.spawn(move || {
                    let mut produced = Vec::new();
                    loop {
                        let index = cursor.fetch_add(1, Ordering::Relaxed);
                        if index >= items.len() {
                            break;
                        }
                        produced.push((index, f(&items[index])));
                    }
                    produced
                })
            })
            .collect();
        for handle in handles {
            for (index, value) in handle.join().expect("llm worker panicked") {
                slots[index] = Some(value);
            }
        }
    });
    slots.into_iter().map(|slot| slot.expect("every index visited")).collect()
}
