//! Content-addressed response cache: one JSON record per request, named by
//! the request fingerprint. There is no TTL; replayability matters more than
//! freshness for psychometric runs.

use super::{BackendError, ChatRequest, ChatResponse, FinishReason, TokenUsage};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    fingerprint: String,
    request: ChatRequest,
    text: String,
    finish_reason: FinishReason,
    usage: TokenUsage,
}

/// A directory of cached responses. Writes go through a temp file and an
/// atomic rename, serialized by an internal lock.
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| {
            BackendError::Configuration(format!("cannot create cache dir {}: {e}", dir.display()))
        })?;
        Ok(ResponseCache { dir, write_lock: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record_path(&self, fingerprint: &str) -> PathBuf {
        self.dir.join(format!("{fingerprint}.json"))
    }

    /// Look up a request. A record that fails to parse or does not match
    /// its key is corruption, reported as an integrity error.
    pub fn lookup(&self, request: &ChatRequest) -> Result<Option<ChatResponse>, BackendError> {
        let fingerprint = request.fingerprint();
        let path = self.record_path(&fingerprint);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(BackendError::Integrity(format!(
                    "cannot read cache record {}: {e}",
                    path.display()
                )))
            }
        };
        let record: CacheRecord = serde_json::from_str(&raw).map_err(|e| {
            BackendError::Integrity(format!("corrupt cache record {}: {e}", path.display()))
        })?;
        if record.fingerprint != fingerprint || &record.request != request {
            return Err(BackendError::Integrity(format!(
                "cache record {} does not match its request",
                path.display()
            )));
        }
        Ok(Some(ChatResponse {
            text: record.text,
            finish_reason: record.finish_reason,
            usage: record.usage,
            cached: true,
        }))
    }

    pub fn store(&self, request: &ChatRequest, response: &ChatResponse) -> Result<(), BackendError> {
        let fingerprint = request.fingerprint();
        let record = CacheRecord {
            fingerprint: fingerprint.clone(),
            request: request.clone(),
            text: response.text.clone(),
            finish_reason: response.finish_reason,
            usage: response.usage,
        };
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        let final_path = self.record_path(&fingerprint);
        let tmp_path = self.dir.join(format!(".tmp-{fingerprint}"));
        let _guard = self.write_lock.lock().expect("cache write lock");
        fs::write(&tmp_path, json).map_err(|e| {
            BackendError::Integrity(format!("cannot write cache record {}: {e}", tmp_path.display()))
        })?;
        fs::rename(&tmp_path, &final_path).map_err(|e| {
            BackendError::Integrity(format!(
                "cannot publish cache record {}: {e}",
                final_path.display()
            ))
        })
    }
}
