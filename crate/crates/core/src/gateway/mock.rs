//! Scripted backend for deterministic tests and dry runs.
//!
//! A script is a JSON document:
//!
//! ```json
//! {
//!   "rules": [
//!     {"fingerprint": "3f9a…", "response": "{\"Score\": 7}"},
//!     {"instance_id": "movies:u1", "run": 0, "stage": "final",
//!      "response": "{\"Score\": 4}", "fail_first": 1, "fail_status": 503}
//!   ],
//!   "default_response": "{\"Score\": 5}",
//!   "embeddings": {"some text": [0.1, 0.2]},
//!   "embedding_dim": 16
//! }
//! ```
//!
//! The first rule whose set fields all match the request answers it. A rule
//! fails its first `fail_first` matching calls with `fail_status`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendErrorKind, ChatBackend, ChatRequest, ModelConfig};

fn default_fail_status() -> u16 {
    503
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub response: String,
    #[serde(default)]
    pub fail_first: u32,
    #[serde(default = "default_fail_status")]
    pub fail_status: u16,
}

impl Default for MockRule {
    fn default() -> Self {
        Self {
            fingerprint: None,
            instance_id: None,
            run: None,
            stage: None,
            response: String::new(),
            fail_first: 0,
            fail_status: default_fail_status(),
        }
    }
}

impl MockRule {
    fn matches(&self, request: &ChatRequest) -> bool {
        if self.fingerprint.as_ref().is_some_and(|f| *f != request.fingerprint) {
            return false;
        }
        let tag = request.tag.as_ref();
        if let Some(id) = &self.instance_id {
            if tag.is_none_or(|t| t.instance_id != *id) {
                return false;
            }
        }
        if let Some(run) = self.run {
            if tag.and_then(|t| t.run_index) != Some(run) {
                return false;
            }
        }
        if let Some(stage) = &self.stage {
            if tag.is_none_or(|t| t.stage != *stage) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    pub default_response: Option<String>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    /// When set, unscripted texts get a deterministic hash-derived vector of
    /// this dimension.
    pub embedding_dim: Option<usize>,
}

impl MockScript {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    calls: Mutex<Vec<u32>>,
    requests: AtomicUsize,
    embed_requests: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let calls = Mutex::new(vec![0; script.rules.len()]);
        Self { script, calls, requests: AtomicUsize::new(0), embed_requests: AtomicUsize::new(0) }
    }

    /// Chat requests received so far, failed attempts included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn embed_request_count(&self) -> usize {
        self.embed_requests.load(Ordering::SeqCst)
    }
}

/// Deterministic pseudo-embedding derived from SHA-256 of the text.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let mut h = Sha256::new();
            h.update((i as u64).to_le_bytes());
            h.update(text.as_bytes());
            let d = h.finalize();
            let x = u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"));
            (x as f64 / u64::MAX as f64) * 2.0 - 1.0
        })
        .collect()
}

impl ChatBackend for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let Some(idx) = self.script.rules.iter().position(|r| r.matches(request)) else {
            return match &self.script.default_response {
                Some(text) => Ok(text.clone()),
                None => Err(BackendError {
                    kind: BackendErrorKind::Unavailable,
                    status: None,
                    message: format!("no mock script entry for request {}", request.fingerprint),
                }),
            };
        };
        let rule = &self.script.rules[idx];
        let seen = {
            let mut calls = self.calls.lock().expect("mock state poisoned");
            calls[idx] += 1;
            calls[idx]
        };
        if seen <= rule.fail_first {
            return Err(BackendError::from_status(
                rule.fail_status,
                format!("scripted failure {seen}/{}", rule.fail_first),
            ));
        }
        Ok(rule.response.clone())
    }

    fn embed(&self, _config: &ModelConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        self.embed_requests.fetch_add(1, Ordering::SeqCst);
        texts
            .iter()
            .map(|t| match (self.script.embeddings.get(t), self.script.embedding_dim) {
                (Some(v), _) => Ok(v.clone()),
                (None, Some(dim)) => Ok(hash_embedding(t, dim)),
                (None, None) => Err(BackendError {
                    kind: BackendErrorKind::Unavailable,
                    status: None,
                    message: format!("no mock embedding for text {t:?}"),
                }),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::RequestTag;
    use serde_json::json;

    fn request(instance: &str, run: Option<u32>, stage: &str) -> ChatRequest {
        ChatRequest {
            endpoint_url: "mock://".into(),
            auth_env_var: String::new(),
            body: json!({}),
            fingerprint: "fp".into(),
            tag: Some(RequestTag { instance_id: instance.into(), run_index: run, stage: stage.into() }),
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let script: MockScript = serde_json::from_value(json!({
            "rules": [
                {"instance_id": "a", "run": 1, "response": "specific"},
                {"instance_id": "a", "response": "any run"},
                {"stage": "final", "response": "fallback"}
            ]
        }))
        .unwrap();
        let m = MockBackend::new(script);
        assert_eq!(m.chat(&request("a", Some(1), "final")).unwrap(), "specific");
        assert_eq!(m.chat(&request("a", Some(0), "final")).unwrap(), "any run");
        assert_eq!(m.chat(&request("b", Some(0), "final")).unwrap(), "fallback");
        assert!(m.chat(&request("b", Some(0), "other")).is_err());
        assert_eq!(m.request_count(), 4);
    }

    #[test]
    fn failure_schedule_counts_per_rule() {
        let script = MockScript {
            rules: vec![MockRule { response: "ok".into(), fail_first: 1, fail_status: 429, ..Default::default() }],
            ..Default::default()
        };
        let m = MockBackend::new(script);
        let e = m.chat(&request("a", None, "x")).unwrap_err();
        assert_eq!((e.kind, e.status), (BackendErrorKind::Transient, Some(429)));
        assert_eq!(m.chat(&request("a", None, "x")).unwrap(), "ok");
    }

    #[test]
    fn hash_embeddings_are_deterministic() {
        assert_eq!(hash_embedding("x", 8), hash_embedding("x", 8));
        assert_ne!(hash_embedding("x", 8), hash_embedding("y", 8));
    }
}
