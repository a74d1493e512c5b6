//! Chat-completion gateway.
//!
//! Every LLM-dependent stage talks to a [`ChatBackend`]. Three backends are
//! interchangeable behind it: the live HTTP client ([`http::HttpBackend`],
//! behind the `http` feature), the content-addressed cache overlay
//! ([`cache::CachedBackend`]) and the scripted mock ([`mock::ScriptedBackend`])
//! that replays registered replies and refuses anything else.

pub mod cache;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{with_cache, CachedBackend};
pub use mock::{MockScript, RecordingBackend, ScriptedBackend};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("no scripted reply registered for request {digest}")]
    MissingScript { digest: String },
    #[error("request {digest} matches {count} scripted substrings")]
    AmbiguousScript { digest: String, count: usize },
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("cache store error: {0}")]
    Cache(String),
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
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// Field order here is the canonical order hashed by [`cache_key`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    /// A temperature-zero request with a single user message.
    pub fn user(model: impl Into<String>, content: impl Into<String>) -> Self {
        ChatRequest { model: model.into(), temperature: 0.0, messages: vec![ChatMessage::user(content)], max_tokens: None }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.model.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty model identifier".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(LlmError::InvalidRequest("empty message content".into()));
        }
        if self.max_tokens == Some(0) {
            return Err(LlmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Compact JSON with fixed field order; `max_tokens` is always present
    /// (as `null` when unset).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("chat request serializes")
    }

    /// All message contents joined by newlines.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// SHA-256 of the canonical request serialization, lowercase hex.
pub fn cache_key(request: &ChatRequest) -> String {
    hex::encode(Sha256::digest(request.canonical_json().as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub usage: Usage,
}

impl ChatResponse {
    /// A completed reply with whitespace-token usage estimates, used by the
    /// offline backends.
    pub fn offline(request: &ChatRequest, content: impl Into<String>) -> Self {
        let content = content.into();
        let usage = Usage {
            prompt_tokens: request.prompt_text().split_whitespace().count() as u64,
            completion_tokens: content.split_whitespace().count() as u64,
        };
        ChatResponse { content, finish_reason: FinishReason::Stop, usage }
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;

    /// Short description recorded in run manifests.
    fn identity(&self) -> String;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }

    fn identity(&self) -> String {
        (**self).identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_hex_and_stable() {
        let a = ChatRequest::user("gpt-4", "hello");
        let k = cache_key(&a);
        assert_eq!(k.len(), 64);
        assert!(k.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        assert_eq!(k, cache_key(&a.clone()));
    }

    #[test]
    fn digest_sensitive_to_temperature_and_max_tokens() {
        let a = ChatRequest::user("gpt-4", "hello");
        let mut b = a.clone();
        b.temperature = 0.5;
        assert_ne!(cache_key(&a), cache_key(&b));
        let mut c = a.clone();
        c.max_tokens = Some(100);
        assert_ne!(cache_key(&a), cache_key(&c));
    }

    #[test]
    fn canonical_form() {
        let a = ChatRequest::user("m", "hi");
        assert_eq!(
            a.canonical_json(),
            r#"{"model":"m","temperature":0.0,"messages":[{"role":"user","content":"hi"}],"max_tokens":null}"#
        );
    }

    #[test]
    fn validation() {
        let mut r = ChatRequest::user("m", "hi");
        assert!(r.validate().is_ok());
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        r.temperature = 0.0;
        r.messages.clear();
        assert!(r.validate().is_err());
        let r = ChatRequest::user("m", "");
        assert!(r.validate().is_err());
    }
}
