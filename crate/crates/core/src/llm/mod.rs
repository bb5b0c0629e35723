//! Access to language models.
//!
//! A [`Backend`] talks to something that produces completions: a remote
//! chat-completions endpoint ([`HttpBackend`]) or a scripted mock
//! ([`MockBackend`]). The [`Gateway`] wraps a backend with the response
//! cache, the in-flight limit and call accounting, and is what the pipeline
//! talks to through the [`LanguageModel`] trait.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::ResponseCache;
pub use http::{HttpBackend, RetryPolicy};
pub use mock::{Matcher, MockBackend, MockEntry, MockMode, MockScript};

use crate::prompt::TemplateName;

/// Tag carried by forced-continuation scoring requests.
pub const SCORE_TAG: &str = "score_continuation";

pub const DEFAULT_CONCURRENCY: usize = 4;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    /// Name of the template that produced the prompt. Used by mock matchers;
    /// never sent over the wire and not part of the cache key.
    #[serde(skip)]
    pub tag: Option<String>,
}

impl LlmRequest {
    /// Concatenated content of all messages, for substring matching.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default)]
    pub usage: Usage,
}

impl LlmResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_logprobs: None,
            usage: Usage::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response from backend: {0}")]
    Protocol(String),
    #[error("mock script exhausted after {consumed} response(s)")]
    MockExhausted { consumed: usize },
    #[error("no mock entry matches request for {template}: {detail}")]
    MockUnmatched { template: String, detail: String },
    #[error("backend cannot score continuations: {0}")]
    Unsupported(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Something that executes requests. Implementations must be deterministic
/// at temperature 0 for the cache to be transparent.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;

    /// Token log-probabilities of the final assistant message when forced
    /// after the preceding user message.
    fn score(&self, _request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        Err(LlmError::Unsupported(
            "backend has no scoring support".into(),
        ))
    }
}

/// Fixed request parameters applied to every pipeline call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl GenerationSettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// What the pipeline stages call.
pub trait LanguageModel: Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
    fn score(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
    fn settings(&self) -> &GenerationSettings;

    /// Sends one user prompt produced by `template` and returns the reply text.
    fn generate(&self, template: TemplateName, prompt: String) -> Result<String, LlmError> {
        let s = self.settings();
        let request = LlmRequest {
            model: s.model.clone(),
            messages: vec![Message::user(prompt)],
            temperature: s.temperature,
            max_tokens: s.max_tokens,
            want_logprobs: false,
            tag: Some(template.as_str().to_string()),
        };
        Ok(self.complete(&request)?.text)
    }

    /// Total log-probability (nats) of `continuation` forced after `prefix`.
    fn score_continuation(&self, prefix: &str, continuation: &str) -> Result<f64, LlmError> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let s = self.settings();
        let request = LlmRequest {
            model: s.model.clone(),
            messages: vec![Message::user(prefix), Message::assistant(continuation)],
            temperature: 0.0,
            max_tokens: 1,
            want_logprobs: true,
            tag: Some(SCORE_TAG.to_string()),
        };
        let response = self.score(&request)?;
        let tokens = response
            .token_logprobs
            .ok_or_else(|| LlmError::Unsupported("response carried no token logprobs".into()))?;
        Ok(tokens.iter().map(|t| t.logprob).sum())
    }
}

/// SHA-256 over a canonical JSON rendering of the request fields that
/// influence the reply: model, temperature, max_tokens, want_logprobs and
/// the ordered messages.
pub fn cache_key(request: &LlmRequest) -> [u8; 32] {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model: &'a str,
        temperature: f64,
        max_tokens: u32,
        want_logprobs: bool,
        messages: &'a [Message],
    }
    let canonical = Canonical {
        model: &request.model,
        temperature: request.temperature,
        max_tokens: request.max_tokens,
        want_logprobs: request.want_logprobs,
        messages: &request.messages,
    };
    let bytes = serde_json::to_vec(&canonical).expect("request serializes");
    Sha256::digest(&bytes).into()
}

/// Counting semaphore for in-flight backend calls.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.freed.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().expect("limiter poisoned") += 1;
        self.limiter.freed.notify_one();
    }
}

/// Cache, concurrency limit and call accounting in front of a backend.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    settings: GenerationSettings,
    limiter: Limiter,
    requests: AtomicU64,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, settings: GenerationSettings) -> Self {
        Self {
            backend,
            cache: None,
            settings,
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
            requests: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_concurrency(mut self, in_flight: usize) -> Self {
        self.limiter = Limiter::new(in_flight);
        self
    }

    /// Requests that reached the backend (cache misses). Monotone.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    /// All requests, cached or not.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }

    fn run(
        &self,
        request: &LlmRequest,
        call: impl FnOnce(&dyn Backend, &LlmRequest) -> Result<LlmResponse, LlmError>,
    ) -> Result<LlmResponse, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::InvalidRequest("request has no messages".into()));
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let key = self.cache.as_ref().map(|_| cache_key(request));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                self.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit);
            }
        }
        let response = {
            let _slot = self.limiter.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            call(self.backend.as_ref(), request)?
        };
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Err(e) = cache.put(key, &response) {
                tracing::warn!("response cache write failed: {e}");
            }
        }
        Ok(response)
    }
}

impl LanguageModel for Gateway {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        if request.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(LlmError::InvalidRequest(
                "generation requests must end with a user message".into(),
            ));
        }
        self.run(request, |b, r| b.complete(r))
    }

    fn score(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let response = self.run(request, |b, r| b.score(r))?;
        if let Some(tokens) = &response.token_logprobs {
            if let Some(bad) = tokens
                .iter()
                .find(|t| t.logprob.is_nan() || t.logprob > 0.0)
            {
                return Err(LlmError::Protocol(format!(
                    "positive or NaN logprob {} for {:?}",
                    bad.logprob, bad.token
                )));
            }
        }
        Ok(response)
    }

    fn settings(&self) -> &GenerationSettings {
        &self.settings
    }
}

/// Counts every call made through it; used to account calls per question.
pub struct Metered<'a> {
    inner: &'a dyn LanguageModel,
    calls: AtomicU64,
}

impl<'a> Metered<'a> {
    pub fn new(inner: &'a dyn LanguageModel) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LanguageModel for Metered<'_> {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }

    fn score(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(request)
    }

    fn settings(&self) -> &GenerationSettings {
        self.inner.settings()
    }
}
