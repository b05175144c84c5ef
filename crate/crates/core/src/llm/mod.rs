//! Provider-agnostic chat-completion gateway.
//!
//! Two backends share one request/response model: an OpenAI-compatible HTTP
//! client with retries, and a replay backend that serves scripted responses
//! per conversation id. Either can sit behind the content-addressed response
//! cache.

mod cache;
mod extract;
mod http;
mod render;
mod replay;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;
pub use extract::{extract_assembly, trim_blank_lines, wrap_in_assembly_fence, NoAssemblyBlock};
pub use http::{chat_completions_url, HttpProvider};
pub use render::{
    debug_feedback, render_debug_prompt, render_generation_prompt, render_prompt_text, target_wording,
    TemplateError, DIAGNOSTIC_EXCERPT_LIMIT, OUTPUT_TEMPLATE_INSTRUCTION,
};
pub use replay::{ReplayProvider, ReplayScript, ReplayStep};

use crate::digest::canonical_digest;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider error after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("replay script has no response for conversation `{conversation}` step {step}")]
    ReplayExhausted { conversation: String, step: usize },
    #[error("replay step {step} of conversation `{conversation}` expects the prompt to contain {hint:?}")]
    ReplayMismatch {
        conversation: String,
        step: usize,
        hint: String,
    },
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Sampling parameters shared by every request of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    16_384
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model: "replay".into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(params: &GenerationParams, messages: Vec<ChatMessage>) -> Result<Self, GatewayError> {
        let request = Self {
            model: params.model.clone(),
            messages,
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        };
        request.validate()?;
        Ok(request)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let last = self
            .messages
            .last()
            .ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
        if last.role != Role::User {
            return Err(GatewayError::InvalidRequest("last message must have role user".into()));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role == Role::User && m.content.is_empty())
        {
            return Err(GatewayError::InvalidRequest("user message content is empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (model, messages, temperature, max_tokens)
    /// serialization. Used as cache key and as the attempt's request digest.
    pub fn cache_key(&self) -> String {
        canonical_digest(self)
    }

    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub provider: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Base URL of an OpenAI-compatible API; `/chat/completions` is appended
    /// unless already present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_request_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_script: Option<PathBuf>,
    /// Response cache root; `None` disables caching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

fn default_api_key_env() -> String {
    "NEUCOMP_API_KEY".into()
}

fn default_retry_limit() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_request_timeout_secs() -> u64 {
    600
}

impl ProviderConfig {
    pub fn replay(script: impl Into<PathBuf>) -> Self {
        Self {
            kind: ProviderKind::Replay,
            endpoint: None,
            api_key_env: default_api_key_env(),
            retry_limit: default_retry_limit(),
            backoff_base_ms: default_backoff_ms(),
            request_timeout_secs: default_request_timeout_secs(),
            replay_script: Some(script.into()),
            cache_dir: None,
        }
    }

    pub fn http(endpoint: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::Http,
            endpoint: Some(endpoint.into()),
            api_key_env: api_key_env.into(),
            retry_limit: default_retry_limit(),
            backoff_base_ms: default_backoff_ms(),
            request_timeout_secs: default_request_timeout_secs(),
            replay_script: None,
            cache_dir: None,
        }
    }

    pub fn backoff_base(&self) -> Duration {
        Duration::from_millis(self.backoff_base_ms)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            ProviderKind::Http if self.endpoint.is_none() => {
                Err(GatewayError::Config("http provider requires an endpoint".into()))
            }
            ProviderKind::Replay if self.replay_script.is_none() => {
                Err(GatewayError::Config("replay provider requires replay_script".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Anything that can answer a chat request. `conversation` identifies the
/// logical dialogue; only the replay backend uses it.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest, conversation: &str) -> Result<ChatResponse, GatewayError>;
}

enum Backend {
    Http(HttpProvider),
    Replay(ReplayProvider),
}

/// Configured provider plus optional response cache.
pub struct Gateway {
    backend: Backend,
    cache: Option<ResponseCache>,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Gateway {
    pub fn from_config(config: &ProviderConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend = match config.kind {
            ProviderKind::Http => Backend::Http(HttpProvider::from_config(config)?),
            ProviderKind::Replay => {
                let path = config.replay_script.as_ref().expect("validated");
                Backend::Replay(ReplayProvider::new(ReplayScript::load(path)?))
            }
        };
        Ok(Self {
            backend,
            cache: config.cache_dir.as_ref().map(ResponseCache::new),
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_replay(script: ReplayScript) -> Self {
        Self {
            backend: Backend::Replay(ReplayProvider::new(script)),
            cache: None,
            key_locks: Mutex::new(HashMap::new()),
        }
    }

    fn call_backend(&self, request: &ChatRequest, conversation: &str) -> Result<ChatResponse, GatewayError> {
        match &self.backend {
            Backend::Http(http) => http.send(request),
            Backend::Replay(replay) => replay.respond(request, conversation),
        }
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().expect("key lock map poisoned");
        locks.entry(key.to_string()).or_default().clone()
    }
}

impl ChatClient for Gateway {
    fn complete(&self, request: &ChatRequest, conversation: &str) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let Some(cache) = &self.cache else {
            return self.call_backend(request, conversation);
        };
        let key = request.cache_key();
        let lock = self.key_lock(&key);
        let _guard = lock.lock().expect("cache key lock poisoned");
        if let Some(mut hit) = cache.get(&key)? {
            hit.cached = true;
            return Ok(hit);
        }
        let response = self.call_backend(request, conversation)?;
        cache.put(&key, &response)?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> GenerationParams {
        GenerationParams {
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 128,
        }
    }

    #[test]
    fn request_must_end_with_user() {
        let err = ChatRequest::new(&params(), vec![ChatMessage::user("a"), ChatMessage::assistant("b")]);
        assert!(matches!(err, Err(GatewayError::InvalidRequest(_))));
        assert!(ChatRequest::new(&params(), vec![]).is_err());
        assert!(ChatRequest::new(&params(), vec![ChatMessage::user("")]).is_err());
    }

    #[test]
    fn cache_key_covers_every_field() {
        let base = ChatRequest::new(&params(), vec![ChatMessage::user("x")]).unwrap();
        let mut hotter = base.clone();
        hotter.temperature = 0.5;
        let mut longer = base.clone();
        longer.max_tokens = 256;
        let mut other_model = base.clone();
        other_model.model = "n".into();
        let keys = [&base, &hotter, &longer, &other_model].map(|r| r.cache_key());
        for i in 0..keys.len() {
            for j in i + 1..keys.len() {
                assert_ne!(keys[i], keys[j]);
            }
        }
        assert_eq!(base.cache_key(), base.clone().cache_key());
    }

    #[test]
    fn provider_config_requires_kind_specific_fields() {
        let mut http = ProviderConfig::http("http://localhost", "K");
        http.endpoint = None;
        assert!(http.validate().is_err());
        let mut replay = ProviderConfig::replay("x.toml");
        replay.replay_script = None;
        assert!(replay.validate().is_err());
    }
}
