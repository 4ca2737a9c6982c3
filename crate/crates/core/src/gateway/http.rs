use async_trait::async_trait;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{CallError, ChatBackend, Completion, CompletionRequest};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "MLLM_API_KEY";

/// OpenAI-compatible `/chat/completions` client.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(endpoint_url: &str, api_key: Option<String>) -> Result<Self, CallError> {
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| CallError::Protocol(format!("http client: {e}")))?;
        Ok(HttpBackend {
            client,
            url: format!("{}/chat/completions", endpoint_url.trim_end_matches('/')),
            api_key: api_key.filter(|k| !k.is_empty()),
        })
    }

    /// Reads the key from [`API_KEY_ENV`].
    pub fn from_env(endpoint_url: &str) -> Result<Self, CallError> {
        HttpBackend::new(endpoint_url, std::env::var(API_KEY_ENV).ok())
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

pub(crate) fn request_body(request: &CompletionRequest<'_>) -> Value {
    json!({
        "model": request.model,
        "temperature": request.temperature,
        "messages": request.messages.to_wire(),
    })
}

/// Pulls `choices[0].message.content` and `usage.completion_tokens`.
pub(crate) fn parse_reply(body: &Value) -> Result<Completion, CallError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| CallError::Protocol("reply lacks choices[0].message.content".into()))?;
    let output_tokens = body.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Ok(Completion {
        text: text.to_owned(),
        output_tokens,
        latency_s: None,
    })
}

fn classify(status: StatusCode, body: String) -> CallError {
    let message = format!("HTTP {}: {}", status.as_u16(), truncate(&body, 300));
    match status.as_u16() {
        401 | 403 => CallError::Auth {
            status: status.as_u16(),
            message,
        },
        408 | 429 | 500..=599 => CallError::Transient(message),
        _ => CallError::Protocol(message),
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn call(&self, request: CompletionRequest<'_>) -> Result<Completion, CallError> {
        let mut req = self.client.post(&self.url).json(&request_body(&request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| CallError::Transient(format!("request failed: {e}")))?;
        let status = resp.status();
        let body = resp
            .text()
            .await
            .map_err(|e| CallError::Transient(format!("reading body: {e}")))?;
        if !status.is_success() {
            return Err(classify(status, body));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| CallError::Protocol(format!("reply is not JSON: {e}")))?;
        parse_reply(&value)
    }
}
