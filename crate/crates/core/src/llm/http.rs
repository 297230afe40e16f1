use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use super::{BackendResult, ChatBackend, CompletionRequest};

pub const API_BASE_ENV: &str = "RECAP_API_BASE";
pub const API_KEY_ENV: &str = "RECAP_API_KEY";

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<WireMessage<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

/// Chat-completions client: `POST {base}/chat/completions`.
pub struct HttpChatBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(api_base: &str, api_key: impl Into<String>) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .expect("http client");
        Self {
            endpoint: format!("{}/chat/completions", api_base.trim_end_matches('/')),
            api_key: api_key.into(),
            client,
        }
    }

    /// Reads the endpoint and credential from the environment. `None` when
    /// either variable is unset or empty.
    pub fn from_env() -> Option<Self> {
        let base = std::env::var(API_BASE_ENV).ok().filter(|s| !s.is_empty())?;
        let key = std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty())?;
        Some(Self::new(&base, key))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

fn is_overflow(body: &Value) -> bool {
    let error = &body["error"];
    error["code"].as_str() == Some("context_length_exceeded")
        || error["type"].as_str() == Some("context_length_exceeded")
        || error["message"]
            .as_str()
            .is_some_and(|m| m.contains("context_length_exceeded") || m.contains("maximum context length"))
}

/// Maps a status code and response body onto a backend result.
pub(crate) fn classify(status: u16, body: &str) -> BackendResult {
    let json: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    if (200..300).contains(&status) {
        return match json["choices"][0]["message"]["content"].as_str() {
            Some(text) => BackendResult::Text(text.to_string()),
            None => BackendResult::Transport {
                detail: format!("response has no choices[0].message.content: {body}"),
                retryable: false,
            },
        };
    }
    if is_overflow(&json) {
        return BackendResult::Overflow;
    }
    BackendResult::Transport {
        detail: format!("HTTP {status}: {body}"),
        retryable: status == 408 || status == 429 || status >= 500,
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> BackendResult {
        let body = WireRequest {
            model: &request.params.model_name,
            temperature: request.params.temperature,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role.wire_name(),
                    content: &m.text,
                })
                .collect(),
            max_tokens: request.params.max_output_tokens,
        };
        let response = match self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
        {
            Ok(r) => r,
            Err(e) => {
                return BackendResult::Transport {
                    detail: e.to_string(),
                    retryable: true,
                }
            }
        };
        let status = response.status().as_u16();
        match response.text() {
            Ok(text) => classify(status, &text),
            Err(e) => BackendResult::Transport {
                detail: e.to_string(),
                retryable: true,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_success() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(classify(200, body), BackendResult::Text("hi".into()));
    }

    #[test]
    fn classify_overflow() {
        let body = r#"{"error":{"message":"too long","type":"invalid_request_error","code":"context_length_exceeded"}}"#;
        assert_eq!(classify(400, body), BackendResult::Overflow);
    }

    #[test]
    fn classify_transport() {
        assert!(matches!(
            classify(500, "oops"),
            BackendResult::Transport { retryable: true, .. }
        ));
        assert!(matches!(
            classify(401, r#"{"error":{"code":"invalid_api_key"}}"#),
            BackendResult::Transport { retryable: false, .. }
        ));
        assert!(matches!(
            classify(200, "{}"),
            BackendResult::Transport { retryable: false, .. }
        ));
    }

    #[test]
    fn endpoint_joins_base() {
        let b = HttpChatBackend::new("http://localhost:1/v1/", "k");
        assert_eq!(b.endpoint(), "http://localhost:1/v1/chat/completions");
    }
}
