//! OpenAI-compatible HTTP backend.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{BackendError, BackendErrorKind, ChatBackend, ChatRequest, ModelConfig};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

fn transport(err: reqwest::Error) -> BackendError {
    let kind = if err.is_timeout() || err.is_connect() || err.is_request() {
        BackendErrorKind::Transient
    } else {
        BackendErrorKind::Unavailable
    };
    BackendError { kind, status: err.status().map(|s| s.as_u16()), message: err.to_string() }
}

fn malformed(what: &str, err: impl std::fmt::Display) -> BackendError {
    BackendError { kind: BackendErrorKind::Unavailable, status: None, message: format!("malformed {what}: {err}") }
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(transport)?;
        Ok(Self { client })
    }

    fn post(&self, url: &str, auth_env_var: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Ok(token) = std::env::var(auth_env_var) {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(transport)?;
        let status = resp.status();
        let text = resp.text().map_err(transport)?;
        if !status.is_success() {
            return Err(BackendError::from_status(status.as_u16(), text));
        }
        Ok(text)
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let url = join_url(&request.endpoint_url, "chat/completions");
        let text = self.post(&url, &request.auth_env_var, &request.body)?;
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| malformed("chat response", e))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content.unwrap_or_default())
            .ok_or_else(|| malformed("chat response", "no choices"))
    }

    fn embed(&self, config: &ModelConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        let url = join_url(&config.endpoint_url, "embeddings");
        let body = json!({ "model": config.model_name, "input": texts });
        let text = self.post(&url, &config.auth_env_var, &body)?;
        let mut parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| malformed("embedding response", e))?;
        parsed.data.sort_by_key(|d| d.index);
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, RetryPolicy};
    use crate::promptgen::{Message, RenderedPrompt, Role};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    type Seen = Arc<Mutex<Vec<(String, String)>>>;

    /// Serves the given (status, body) pairs in order, one per connection,
    /// and records each request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, Seen) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_string();
                    }
                    if line == "\r\n" {
                        break;
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                let path = head.split_whitespace().nth(1).unwrap_or_default().to_string();
                log.lock().unwrap().push((format!("{path} {auth}"), String::from_utf8(buf).unwrap()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn prompt() -> RenderedPrompt {
        RenderedPrompt {
            messages: vec![
                Message { role: Role::System, text: "sys".into() },
                Message { role: Role::User, text: "rate it".into() },
                Message { role: Role::AssistantPrefix, text: "[Review]".into() },
            ],
            domain_label: "movie".into(),
            config_fingerprint: String::new(),
        }
    }

    #[test]
    fn chat_wire_format_and_retry() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"{\"Score\": 6}"}}]}"#;
        let (url, seen) = serve(vec![(503, "busy".into()), (200, ok.into())]);
        std::env::set_var("RATINGBENCH_TEST_KEY", "sekret");
        let cfg = ModelConfig {
            model_name: "llama".into(),
            endpoint_url: url,
            auth_env_var: "RATINGBENCH_TEST_KEY".into(),
            ..ModelConfig::default()
        };
        let g = Gateway::new(Arc::new(HttpBackend::new(Duration::from_secs(10)).unwrap()))
            .with_retry(RetryPolicy { initial_backoff_ms: 1, ..RetryPolicy::default() });
        let out = g.complete(&prompt(), &cfg, None).unwrap();
        assert_eq!(out.text, "{\"Score\": 6}");
        assert_eq!(out.attempt_count, 2);

        let seen = seen.lock().unwrap();
        assert_eq!(seen[1].0, "/v1/chat/completions authorization: Bearer sekret");
        let body: serde_json::Value = serde_json::from_str(&seen[1].1).unwrap();
        assert_eq!(body["model"], "llama");
        assert_eq!(body["max_tokens"], 768);
        assert_eq!(body["temperature"], 0.01);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "rate it");
        assert_eq!(body["messages"][2]["role"], "assistant");
    }

    #[test]
    fn client_error_is_config_error() {
        let (url, _) = serve(vec![(400, r#"{"error":"bad model"}"#.into())]);
        let cfg = ModelConfig { model_name: "x".into(), endpoint_url: url, ..ModelConfig::default() };
        let g = Gateway::new(Arc::new(HttpBackend::new(Duration::from_secs(10)).unwrap()));
        assert!(matches!(
            g.complete(&prompt(), &cfg, None),
            Err(crate::gateway::GatewayError::Config { status: Some(400), .. })
        ));
    }

    #[test]
    fn embeddings_wire_format() {
        let body = r#"{"data":[{"index":1,"embedding":[0,2]},{"index":0,"embedding":[3,4]}]}"#;
        let (url, seen) = serve(vec![(200, body.into())]);
        let cfg = ModelConfig { model_name: "simcse".into(), endpoint_url: url, ..ModelConfig::default() };
        let g = Gateway::new(Arc::new(HttpBackend::new(Duration::from_secs(10)).unwrap()));
        let v = g.embed(&["a".into(), "b".into()], &cfg).unwrap();
        assert_eq!(v, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
        let seen = seen.lock().unwrap();
        assert!(seen[0].0.starts_with("/v1/embeddings"));
        let req: serde_json::Value = serde_json::from_str(&seen[0].1).unwrap();
        assert_eq!(req["input"], serde_json::json!(["a", "b"]));
    }
}
