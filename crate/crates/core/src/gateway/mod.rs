//! Chat-completion and embedding access with retries, plus multi-run
//! experiment orchestration.
//!
//! Backends implement [`ChatBackend`]; [`http::HttpBackend`] speaks the
//! OpenAI-compatible wire protocol and [`mock::MockBackend`] replays a
//! script for deterministic tests.

pub mod experiment;
pub mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fingerprint::digest_json;
use crate::promptgen::RenderedPrompt;

pub use experiment::{run_experiment, synthesize_descriptions, ArmSpec, ExperimentError, ExperimentOutcome, Pipeline};

/// Default generation budget for instruction-tuned models.
pub const DEFAULT_MAX_TOKENS: u32 = 768;
/// Generation budget for reasoning models.
pub const REASONING_MAX_TOKENS: u32 = 32_768;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub endpoint_url: String,
    /// Environment variable holding the bearer token.
    pub auth_env_var: String,
    /// Forward each run's seed as a `seed` request field.
    pub send_seed: bool,
    pub extra_params: BTreeMap<String, Value>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_name: String::new(),
            temperature: 0.01,
            max_tokens: DEFAULT_MAX_TOKENS,
            endpoint_url: "http://localhost:8000/v1".into(),
            auth_env_var: "OPENAI_API_KEY".into(),
            send_seed: false,
            extra_params: BTreeMap::new(),
        }
    }
}

impl ModelConfig {
    pub fn mock(name: &str) -> Self {
        Self { model_name: name.into(), endpoint_url: "mock://".into(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if self.model_name.is_empty() {
            return bad("model_name is empty");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be finite and non-negative");
        }
        Ok(())
    }
}

/// Multi-run plan for one experiment arm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPlan {
    pub n_runs: u32,
    pub seeds: Vec<u64>,
    pub max_parallel: usize,
}

impl RunPlan {
    pub fn new(n_runs: u32, seeds: Vec<u64>, max_parallel: usize) -> Result<Self, GatewayError> {
        let plan = Self { n_runs, seeds, max_parallel };
        plan.validate()?;
        Ok(plan)
    }

    /// Six runs, seeds `0..6`.
    pub fn open_model(max_parallel: usize) -> Self {
        Self { n_runs: 6, seeds: (0..6).collect(), max_parallel }
    }

    /// A single run.
    pub fn closed_model(max_parallel: usize) -> Self {
        Self { n_runs: 1, seeds: vec![0], max_parallel }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::InvalidConfig(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1".into());
        }
        if self.seeds.len() != self.n_runs as usize {
            return bad(format!("{} seeds for {} runs", self.seeds.len(), self.n_runs));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub text: String,
    pub request_fingerprint: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// Identifies which pipeline step a request belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTag {
    pub instance_id: String,
    pub run_index: Option<u32>,
    pub stage: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub endpoint_url: String,
    pub auth_env_var: String,
    pub body: Value,
    pub fingerprint: String,
    pub tag: Option<RequestTag>,
}

impl ChatRequest {
    /// Builds the request body: `model`, `messages`, `temperature`,
    /// `max_tokens`, plus any extra parameters. An assistant prefix is sent
    /// as a trailing assistant message.
    pub fn new(prompt: &RenderedPrompt, config: &ModelConfig, tag: Option<RequestTag>) -> Self {
        let messages: Vec<WireMessage> = prompt
            .messages
            .iter()
            .map(|m| WireMessage { role: m.role.as_str().to_string(), content: m.text.clone() })
            .collect();
        let mut body = serde_json::Map::new();
        for (k, v) in &config.extra_params {
            body.insert(k.clone(), v.clone());
        }
        body.insert("model".into(), Value::String(config.model_name.clone()));
        body.insert("messages".into(), serde_json::to_value(messages).expect("serializable"));
        body.insert("temperature".into(), Value::from(config.temperature));
        body.insert("max_tokens".into(), Value::from(config.max_tokens));
        let body = Value::Object(body);
        Self {
            endpoint_url: config.endpoint_url.clone(),
            auth_env_var: config.auth_env_var.clone(),
            fingerprint: digest_json(&body),
            body,
            tag,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendErrorKind {
    /// Timeouts, 429 and 5xx; retried.
    Transient,
    /// Other 4xx; a configuration problem, never retried.
    Rejected,
    /// Nothing can answer this request; not retried.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message} (status {status:?})")]
pub struct BackendError {
    pub kind: BackendErrorKind,
    pub status: Option<u16>,
    pub message: String,
}

impl BackendError {
    pub fn from_status(status: u16, message: impl Into<String>) -> Self {
        let kind = if status == 429 || status >= 500 {
            BackendErrorKind::Transient
        } else {
            BackendErrorKind::Rejected
        };
        Self { kind, status: Some(status), message: message.into() }
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError>;

    fn embed(&self, config: &ModelConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message} (last status {status:?})")]
    Transport { status: Option<u16>, message: String, attempts: u32 },
    #[error("request rejected (status {status:?}): {message}")]
    Config { status: Option<u16>, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding error: {0}")]
    Embedding(String),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, Self::Transport { .. })
    }
}

/// Exponential backoff schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub factor: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 6, initial_backoff_ms: 1_000, factor: 2.0, max_backoff_ms: 60_000 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let exp = self.factor.powi(attempt.saturating_sub(1) as i32);
        let ms = (self.initial_backoff_ms as f64 * exp).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

pub const DEFAULT_EMBED_BATCH: usize = 32;

/// Retrying front end over a [`ChatBackend`]. Safe to share across threads.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    embed_batch: usize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("retry", &self.retry).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend, retry: RetryPolicy::default(), embed_batch: DEFAULT_EMBED_BATCH }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_embed_batch(mut self, batch: usize) -> Self {
        self.embed_batch = batch.max(1);
        self
    }

    /// Sends one chat completion, retrying transient failures.
    pub fn complete(
        &self,
        prompt: &RenderedPrompt,
        config: &ModelConfig,
        tag: Option<&RequestTag>,
    ) -> Result<RawOutput, GatewayError> {
        config.validate()?;
        let request = ChatRequest::new(prompt, config, tag.cloned());
        let started = Instant::now();
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.chat(&request) {
                Ok(text) => {
                    return Ok(RawOutput {
                        text,
                        request_fingerprint: request.fingerprint.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    })
                }
                Err(e) => match e.kind {
                    BackendErrorKind::Rejected => {
                        return Err(GatewayError::Config { status: e.status, message: e.message })
                    }
                    BackendErrorKind::Unavailable => {
                        return Err(GatewayError::Transport {
                            status: e.status,
                            message: e.message,
                            attempts: attempt,
                        })
                    }
                    BackendErrorKind::Transient if attempt >= max_attempts => {
                        return Err(GatewayError::Transport {
                            status: e.status,
                            message: e.message,
                            attempts: attempt,
                        })
                    }
                    BackendErrorKind::Transient => {
                        let delay = self.retry.delay_after(attempt);
                        log::debug!("transient failure ({e}); retrying in {delay:?}");
                        if !delay.is_zero() {
                            std::thread::sleep(delay);
                        }
                    }
                },
            }
        }
    }

    /// Embeds `texts` in batches and L2-normalizes every vector.
    pub fn embed(&self, texts: &[String], config: &ModelConfig) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Embedding("no texts to embed".into()));
        }
        let mut out = Vec::with_capacity(texts.len());
        let mut dim = None;
        for batch in texts.chunks(self.embed_batch) {
            let vectors = self.embed_batch_with_retry(batch, config)?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::Embedding(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for v in vectors {
                let d = *dim.get_or_insert(v.len());
                if v.len() != d || d == 0 {
                    return Err(GatewayError::Embedding(format!(
                        "dimension mismatch: {} vs {d}",
                        v.len()
                    )));
                }
                out.push(normalize(v)?);
            }
        }
        Ok(out)
    }

    fn embed_batch_with_retry(
        &self,
        batch: &[String],
        config: &ModelConfig,
    ) -> Result<Vec<Vec<f64>>, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.embed(config, batch) {
                Ok(v) => return Ok(v),
                Err(e) if e.kind == BackendErrorKind::Transient && attempt < self.retry.max_attempts => {
                    std::thread::sleep(self.retry.delay_after(attempt));
                }
                Err(e) if e.kind == BackendErrorKind::Rejected => {
                    return Err(GatewayError::Config { status: e.status, message: e.message })
                }
                Err(e) => {
                    return Err(GatewayError::Transport {
                        status: e.status,
                        message: e.message,
                        attempts: attempt,
                    })
                }
            }
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>, GatewayError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(GatewayError::Embedding("zero or non-finite embedding vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
