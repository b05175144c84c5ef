//! OpenAI-compatible chat-completions client.
//!
//! Request body: `{"model", "messages": [{"role", "content"}], "temperature",
//! "max_tokens"}`, POSTed with `Authorization: Bearer <key>`. Response fields
//! read: `choices[0].message.content`, `usage.prompt_tokens`,
//! `usage.completion_tokens`, `model`.

use std::thread;
use std::time::Duration;

use serde::Deserialize;

use super::{ChatRequest, ChatResponse, GatewayError, ProviderConfig};

pub struct HttpProvider {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
    retry_limit: u32,
    backoff_base: Duration,
}

pub fn chat_completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Failure {
    Transient(String),
    Fatal(GatewayError),
}

impl HttpProvider {
    pub fn from_config(config: &ProviderConfig) -> Result<Self, GatewayError> {
        let endpoint = config
            .endpoint
            .as_deref()
            .ok_or_else(|| GatewayError::Config("http provider requires an endpoint".into()))?;
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GatewayError::Auth(format!("environment variable {} is not set", config.api_key_env)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(Self {
            client,
            url: chat_completions_url(endpoint),
            api_key,
            retry_limit: config.retry_limit,
            backoff_base: config.backoff_base(),
        })
    }

    /// Sends `request`, retrying transient failures (connection errors, 429,
    /// 5xx) up to `retry_limit` times with delays `backoff_base * 2^k`.
    pub fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let attempts = self.retry_limit + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.send_once(request) {
                Ok(response) => return Ok(response),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(message)) => {
                    tracing::warn!(attempt = attempt + 1, %message, "transient provider failure");
                    last = message;
                }
            }
            if attempt + 1 < attempts {
                thread::sleep(self.backoff_base.saturating_mul(1u32 << attempt.min(16)));
            }
        }
        Err(GatewayError::Provider { attempts, message: last })
    }

    fn send_once(&self, request: &ChatRequest) -> Result<ChatResponse, Failure> {
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| Failure::Transient(e.to_string()))?;
        if status.is_success() {
            return parse_body(&body).map_err(Failure::Fatal);
        }
        let message = format!("HTTP {}: {}", status.as_u16(), body.chars().take(500).collect::<String>());
        match status.as_u16() {
            401 | 403 => Err(Failure::Fatal(GatewayError::Auth(message))),
            408 | 429 | 500..=599 => Err(Failure::Transient(message)),
            _ => Err(Failure::Fatal(GatewayError::Provider { attempts: 1, message })),
        }
    }
}

fn parse_body(body: &str) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse = serde_json::from_str(body).map_err(|e| GatewayError::Provider {
        attempts: 1,
        message: format!("malformed response body: {e}"),
    })?;
    let content = wire
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GatewayError::Provider {
            attempts: 1,
            message: "response has no message content".into(),
        })?;
    let usage = wire.usage.unwrap_or(WireUsage {
        prompt_tokens: 0,
        completion_tokens: 0,
    });
    Ok(ChatResponse {
        content,
        prompt_tokens: usage.prompt_tokens,
        completion_tokens: usage.completion_tokens,
        provider: wire.model.unwrap_or_else(|| "http".into()),
        cached: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_gets_path_appended_once() {
        assert_eq!(chat_completions_url("http://h/v1"), "http://h/v1/chat/completions");
        assert_eq!(chat_completions_url("http://h/v1/"), "http://h/v1/chat/completions");
        assert_eq!(
            chat_completions_url("http://h/v1/chat/completions"),
            "http://h/v1/chat/completions"
        );
    }

    #[test]
    fn parses_openai_body() {
        let body = r#"{"model":"m1","choices":[{"index":0,"message":{"role":"assistant","content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1,"total_tokens":4}}"#;
        let r = parse_body(body).unwrap();
        assert_eq!((r.content.as_str(), r.prompt_tokens, r.completion_tokens), ("hi", 3, 1));
        assert_eq!(r.provider, "m1");
    }

    #[test]
    fn missing_content_is_an_error() {
        assert!(parse_body(r#"{"choices":[]}"#).is_err());
    }
}
