//! Live chat-completions transport speaking the OpenAI-compatible JSON
//! shape, so hosted APIs and local inference servers work unchanged.
//!
//! Transient failures (429, 5xx, network errors) are retried with
//! exponential backoff up to a configured cap; other 4xx responses are
//! configuration errors and fail immediately.

use super::{BackendError, ChatRequest, ChatResponse, ChatTransport, FinishReason, TokenUsage};
use serde::Deserialize;
use std::time::Duration;

#[derive(Clone, Debug)]
pub struct HttpBackendConfig {
    /// Base URL up to and including the API version, e.g.
    /// `https://api.openai.com/v1` or `http://localhost:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            api_key: None,
            max_retries: 4,
            initial_backoff_ms: 250,
            max_backoff_ms: 8_000,
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        HttpBackend { config, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn payload(&self, request: &ChatRequest) -> String {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(serde_json::json!({"role": "system", "content": system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user}));
        let mut body = serde_json::json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed_hint {
            body["seed"] = serde_json::json!(seed);
        }
        body.to_string()
    }

    fn attempt(&self, request: &ChatRequest) -> Result<Attempt, BackendError> {
        let mut builder = self
            .agent
            .post(&self.endpoint())
            .header("content-type", "application/json");
        if let Some(key) = &self.config.api_key {
            builder = builder.header("authorization", &format!("Bearer {key}"));
        }
        let response = match builder.send(self.payload(request)) {
            Ok(response) => response,
            Err(e) => return Ok(Attempt::Retry(format!("network error: {e}"))),
        };
        let status = response.status().as_u16();
        let body = response
            .into_body()
            .read_to_string()
            .map_err(|e| BackendError::Transport(format!("cannot read response body: {e}")))?;
        match status {
            200..=299 => Ok(Attempt::Done(parse_body(&body)?)),
            429 | 500..=599 => Ok(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(BackendError::Configuration(format!(
                "HTTP {status}: {}",
                snippet(&body)
            ))),
        }
    }
}

fn snippet(body: &str) -> &str {
    let end = body
        .char_indices()
        .nth(200)
        .map(|(i, _)| i)
        .unwrap_or(body.len());
    &body[..end]
}

fn parse_body(body: &str) -> Result<ChatResponse, BackendError> {
    let wire: WireResponse = serde_json::from_str(body).map_err(|e| {
        BackendError::Transport(format!("malformed response body: {e}: {}", snippet(body)))
    })?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Transport("response has no choices".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Other,
    };
    let text = choice.message.content.unwrap_or_default();
    if text.is_empty() && finish_reason == FinishReason::Stop {
        return Err(BackendError::Transport("response text is empty".into()));
    }
    let usage = wire
        .usage
        .map(|u| TokenUsage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
        .unwrap_or_default();
    Ok(ChatResponse { text, finish_reason, usage, cached: false })
}

impl ChatTransport for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let cap = Duration::from_millis(self.config.max_backoff_ms);
        let mut last_failure = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(cap);
            }
            match self.attempt(request)? {
                Attempt::Done(response) => return Ok(response),
                Attempt::Retry(reason) => last_failure = reason,
            }
        }
        Err(BackendError::Transport(format!(
            "exhausted {} retries: {last_failure}",
            self.config.max_retries
        )))
    }
}
