//! Deterministic scripted mock backend.
//!
//! A [`MockScript`] is an ordered list of (matcher, behavior) rules plus a
//! default behavior; the first matching rule wins. Behaviors are pure
//! functions of the request: anything random is keyed by the script seed
//! and the request fingerprint, never by call order, so runs stay
//! bit-reproducible no matter how a batch interleaves threads.
//!
//! Scripts are plain JSON and can be loaded from disk, which lets CLI
//! fixtures and acceptance tests drive the whole pipeline offline.

use super::{BackendError, ChatRequest, ChatResponse, ChatTransport, FinishReason, TokenUsage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Predicate over a request. `Always` matches everything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockMatcher {
    Always,
    UserContains { needle: String },
    SystemContains { needle: String },
}

impl MockMatcher {
    fn matches(&self, request: &ChatRequest) -> bool {
        match self {
            MockMatcher::Always => true,
            MockMatcher::UserContains { needle } => request.user.contains(needle),
            MockMatcher::SystemContains { needle } => {
                request.system.as_deref().is_some_and(|s| s.contains(needle))
            }
        }
    }
}

/// Scripted response behavior.
///
/// The multiple-choice behaviors (`OptionContaining`, `RateGatedOption`,
/// `TokenGateOption`) read the presented options from the request as lines
/// of the form `X) text` and answer with a presentation letter, which is
/// how a real model is instructed to reply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Reply with fixed text.
    Text { text: String },
    /// Simulate a transport failure.
    Fail { message: String },
    /// Pick one choice uniformly, keyed by (script seed, request).
    UniformChoice { choices: Vec<String> },
    /// Answer the presented option whose text contains `needle`; reply
    /// `fallback` verbatim when no option matches.
    OptionContaining {
        needle: String,
        #[serde(default)]
        fallback: String,
    },
    /// Answer a `high_needle` option with probability `high_rate` (keyed
    /// by seed and request), otherwise a `low_needle` option.
    RateGatedOption {
        high_needle: String,
        low_needle: String,
        high_rate: f64,
    },
    /// Reply `cycle[index % len]` where `index` is the integer following
    /// `marker` in the user text; falls back to `cycle[0]` when absent.
    /// Models a position-biased responder for order-bias experiments.
    CycleByMarkerIndex { marker: String, cycle: Vec<String> },
    /// Echo the text between `start` and `end` in the user message,
    /// prefixed, optionally truncated to `max_words` words.
    EchoBetween {
        start: String,
        end: String,
        #[serde(default)]
        prefix: String,
        #[serde(default)]
        max_words: Option<usize>,
    },
    /// Scripted hill-climb target: count how many of `tokens` occur in
    /// the system prompt, read the integer after `threshold_marker` in the
    /// user text, and answer a `high_needle` option when the count meets
    /// the threshold (else a `low_needle` option).
    TokenGateOption {
        tokens: Vec<String>,
        threshold_marker: String,
        high_needle: String,
        low_needle: String,
    },
    /// Scripted hill-climb optimizer: take the last block delimited by
    /// `prior_start`/`prior_end` in the user text (the highest-scoring
    /// trajectory entry), append one of `tokens` not yet present (keyed by
    /// the request), and wrap the result in `wrap_start`/`wrap_end`.
    ExtendDelimitedPrompt {
        prior_start: String,
        prior_end: String,
        tokens: Vec<String>,
        wrap_start: String,
        wrap_end: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub when: MockMatcher,
    pub respond: MockBehavior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default: MockBehavior,
}

impl MockScript {
    /// A script that always replies with the same text.
    pub fn constant(text: impl Into<String>) -> Self {
        MockScript {
            seed: 0,
            rules: Vec::new(),
            default: MockBehavior::Text { text: text.into() },
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Configuration(format!("cannot read mock script {}: {e}", path.display()))
        })?;
        serde_json::from_str(&raw).map_err(|e| {
            BackendError::Configuration(format!("invalid mock script {}: {e}", path.display()))
        })
    }
}

/// Scripted transport evaluating a [`MockScript`].
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        Ok(MockBackend::new(MockScript::from_file(path)?))
    }
}

impl ChatTransport for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let behavior = self
            .script
            .rules
            .iter()
            .find(|rule| rule.when.matches(request))
            .map(|rule| &rule.respond)
            .unwrap_or(&self.script.default);
        let text = eval_behavior(behavior, request, self.script.seed)?;
        Ok(ChatResponse {
            usage: TokenUsage {
                prompt_tokens: (request.user.len() / 4) as u32,
                completion_tokens: (text.len() / 4).max(1) as u32,
            },
            finish_reason: FinishReason::Stop,
            text,
            cached: false,
        })
    }
}

/// Deterministic 64-bit value from the script seed and request identity.
fn request_draw(seed: u64, request: &ChatRequest) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(request.fingerprint().as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Presented options: lines of the form `X) text` with X in A..D.
fn presented_options(user: &str) -> Vec<(char, &str)> {
    user.lines()
        .filter_map(|line| {
            let line = line.trim_start();
            let mut chars = line.chars();
            let letter = chars.next()?;
            if !('A'..='D').contains(&letter) {
                return None;
            }
            if chars.next()? != ')' {
                return None;
            }
            Some((letter, line[2..].trim()))
        })
        .collect()
}

fn answer_option_containing(user: &str, needle: &str) -> Option<String> {
    presented_options(user)
        .into_iter()
        .find(|(_, text)| text.contains(needle))
        .map(|(letter, _)| letter.to_string())
}

/// First integer following `marker`.
fn integer_after_marker(text: &str, marker: &str) -> Option<usize> {
    let at = text.find(marker)? + marker.len();
    let digits: String = text[at..].chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

fn eval_behavior(
    behavior: &MockBehavior,
    request: &ChatRequest,
    seed: u64,
) -> Result<String, BackendError> {
    match behavior {
        MockBehavior::Text { text } => Ok(text.clone()),
        MockBehavior::Fail { message } => {
            Err(BackendError::Transport(format!("scripted failure: {message}")))
        }
        MockBehavior::UniformChoice { choices } => {
            if choices.is_empty() {
                return Err(BackendError::Configuration(
                    "uniform_choice with no choices".into(),
                ));
            }
            let draw = request_draw(seed, request) as usize;
            Ok(choices[draw % choices.len()].clone())
        }
        MockBehavior::OptionContaining { needle, fallback } => {
            Ok(answer_option_containing(&request.user, needle).unwrap_or_else(|| fallback.clone()))
        }
        MockBehavior::RateGatedOption { high_needle, low_needle, high_rate } => {
            let draw = request_draw(seed, request) as f64 / u64::MAX as f64;
            let needle = if draw < *high_rate { high_needle } else { low_needle };
            Ok(answer_option_containing(&request.user, needle).unwrap_or_default())
        }
        MockBehavior::CycleByMarkerIndex { marker, cycle } => {
            if cycle.is_empty() {
                return Err(BackendError::Configuration(
                    "cycle_by_marker_index with empty cycle".into(),
                ));
            }
            let index = integer_after_marker(&request.user, marker).unwrap_or(0);
            Ok(cycle[index % cycle.len()].clone())
        }
        MockBehavior::EchoBetween { start, end, prefix, max_words } => {
            let user = &request.user;
            let body = user
                .find(start.as_str())
                .map(|s| &user[s + start.len()..])
                .and_then(|rest| rest.find(end.as_str()).map(|e| &rest[..e]))
                .unwrap_or("");
            let mut echoed = body.trim().to_string();
            if let Some(limit) = max_words {
                echoed = echoed
                    .split_whitespace()
                    .take(*limit)
                    .collect::<Vec<_>>()
                    .join(" ");
            }
            Ok(format!("{prefix}{echoed}"))
        }
        MockBehavior::TokenGateOption { tokens, threshold_marker, high_needle, low_needle } => {
            let system = request.system.as_deref().unwrap_or("");
            let count = tokens.iter().filter(|t| system.contains(t.as_str())).count();
            let threshold =
                integer_after_marker(&request.user, threshold_marker).unwrap_or(usize::MAX);
            let needle = if count >= threshold { high_needle } else { low_needle };
            Ok(answer_option_containing(&request.user, needle).unwrap_or_default())
        }
        MockBehavior::ExtendDelimitedPrompt { prior_start, prior_end, tokens, wrap_start, wrap_end } => {
            let user = &request.user;
            let base = user
                .rfind(prior_start.as_str())
                .map(|s| &user[s + prior_start.len()..])
                .and_then(|rest| rest.find(prior_end.as_str()).map(|e| &rest[..e]))
                .unwrap_or("")
                .trim();
            let missing: Vec<&String> =
                tokens.iter().filter(|t| !base.contains(t.as_str())).collect();
            let candidate = if missing.is_empty() {
                base.to_string()
            } else {
                let pick = request_draw(seed, request) as usize % missing.len();
                format!("{base} {}", missing[pick]).trim().to_string()
            };
            Ok(format!("{wrap_start}\n{candidate}\n{wrap_end}"))
        }
    }
}
