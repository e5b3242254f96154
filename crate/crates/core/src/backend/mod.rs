//! Uniform chat-completion interface over live HTTP endpoints and a
//! deterministic scripted mock, with response caching, retry, and a
//! bounded-concurrency batch primitive.
//!
//! Callers talk to [`Backend`], which layers a content-addressed response
//! cache over a [`ChatTransport`]. Greedy (temperature 0) calls are always
//! cached, since they dominate cost during scoring. Stochastic calls are not
//! cached unless the backend is built with stochastic caching enabled,
//! since caching them would collapse candidate diversity.

mod cache;
mod http;
mod mock;

pub use cache::ResponseCache;
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockBehavior, MockMatcher, MockRule, MockScript};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Network failures, exhausted retries, and scripted mock failures.
    #[error("transport error: {0}")]
    Transport(String),
    /// Invalid setup or requests the endpoint permanently rejects.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// A cache record that does not match its key or cannot be parsed.
    #[error("cache integrity error: {0}")]
    Integrity(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// One chat completion request. The cache key covers every field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    /// 0 means deterministic sampling intent.
    pub temperature: f64,
    pub max_tokens: u32,
    /// Per-call sampling seed; distinguishes otherwise-identical
    /// stochastic calls. Passed through to endpoints that support it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_hint: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            system: None,
            user: user.into(),
            temperature: 0.0,
            max_tokens: 256,
            seed_hint: None,
        }
    }

    pub fn with_system(mut self, system: Option<String>) -> Self {
        self.system = system;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed_hint(mut self, seed_hint: Option<u64>) -> Self {
        self.seed_hint = seed_hint;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.user.is_empty() {
            return Err(BackendError::InvalidRequest("user message is empty".into()));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is not a finite non-negative number",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Content hash over (model_id, system, user, temperature, max_tokens,
    /// seed_hint); names cache records and keys mock randomness.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model_id.as_bytes());
        hasher.update([0x1f]);
        match &self.system {
            Some(s) => {
                hasher.update([1]);
                hasher.update(s.as_bytes());
            }
            None => hasher.update([0]),
        }
        hasher.update([0x1f]);
        hasher.update(self.user.as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.temperature.to_le_bytes());
        hasher.update(self.max_tokens.to_le_bytes());
        match self.seed_hint {
            Some(s) => {
                hasher.update([1]);
                hasher.update(s.to_le_bytes());
            }
            None => hasher.update([0]),
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

impl TokenUsage {
    pub fn total(&self) -> u32 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: TokenUsage,
    /// True when served from the response cache.
    pub cached: bool,
}

/// Raw completion source: a live endpoint or a scripted mock.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// A named model handle: transport plus caching policy. Shareable across
/// threads; cache writes are serialized internally.
pub struct Backend {
    model_id: String,
    transport: Box<dyn ChatTransport>,
    cache: Option<ResponseCache>,
    cache_stochastic: bool,
}

impl Backend {
    pub fn new(model_id: impl Into<String>, transport: Box<dyn ChatTransport>) -> Self {
        Backend {
            model_id: model_id.into(),
            transport,
            cache: None,
            cache_stochastic: false,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Force caching of temperature>0 calls (exact-replay runs).
    pub fn with_stochastic_caching(mut self, on: bool) -> Self {
        self.cache_stochastic = on;
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Start a request addressed to this backend's model.
    pub fn new_request(&self, user: impl Into<String>) -> ChatRequest {
        ChatRequest::new(self.model_id.clone(), user)
    }

    fn cacheable(&self, request: &ChatRequest) -> bool {
        request.temperature == 0.0 || self.cache_stochastic
    }

    /// Complete one request, serving from and filling the cache according
    /// to the temperature policy.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let use_cache = self.cache.is_some() && self.cacheable(request);
        if use_cache {
            if let Some(hit) = self.cache.as_ref().unwrap().lookup(request)? {
                return Ok(hit);
            }
        }
        let response = self.transport.complete(request)?;
        if use_cache {
            self.cache.as_ref().unwrap().store(request, &response)?;
        }
        Ok(response)
    }

    /// Complete a batch with at most `max_in_flight` requests outstanding
    /// at once. Responses come back in request order; each failure carries
    /// its own slot and the rest of the batch still completes.
    pub fn complete_batch(
        &self,
        requests: &[ChatRequest],
        max_in_flight: usize,
    ) -> Vec<Result<ChatResponse, BackendError>> {
        assert!(max_in_flight >= 1, "max_in_flight must be ≥ 1");
        if requests.is_empty() {
            return Vec::new();
        }
        let slots: Vec<Mutex<Option<Result<ChatResponse, BackendError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = max_in_flight.min(requests.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[index]);
                    *slots[index].lock().expect("slot lock") = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
            .collect()
    }
}
