//! OpenAI-compatible chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, ChatResponse, FinishReason, LlmError, Usage};

pub const API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub base_url: String,
    /// Never serialized; read from [`API_KEY_ENV`].
    #[serde(skip)]
    pub api_key: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Base delay; attempt `k` waits `retry_backoff_s * 2^k`.
    pub retry_backoff_s: f64,
}

impl std::fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .field("timeout_s", &self.timeout_s)
            .field("max_retries", &self.max_retries)
            .field("retry_backoff_s", &self.retry_backoff_s)
            .finish()
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: "https://api.openai.com".into(),
            api_key: String::new(),
            timeout_s: 60.0,
            max_retries: 3,
            retry_backoff_s: 2.0,
        }
    }
}

impl BackendConfig {
    pub fn with_env_key(mut self) -> Result<Self, LlmError> {
        self.api_key = std::env::var(API_KEY_ENV).map_err(|_| LlmError::Config(format!("{API_KEY_ENV} is not set")))?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.max_retries > 10 {
            return Err(LlmError::Config(format!("max_retries {} exceeds 10", self.max_retries)));
        }
        if !(self.timeout_s > 0.0) || !(self.retry_backoff_s > 0.0) {
            return Err(LlmError::Config("timeout_s and retry_backoff_s must be positive".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(LlmError::Config(format!("base_url {:?} is not an http(s) URL", self.base_url)));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: &'a [super::ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
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

pub fn request_body(request: &ChatRequest) -> String {
    serde_json::to_string(&WireRequest {
        model: &request.model,
        temperature: request.temperature,
        messages: &request.messages,
        max_tokens: request.max_tokens,
    })
    .expect("wire request serializes")
}

fn parse_body(body: &str) -> Result<ChatResponse, LlmError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| LlmError::Protocol { status: 200, body: format!("unparseable body ({e}): {body}") })?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::Protocol { status: 200, body: format!("no choices: {body}") })?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let content = choice.message.content.unwrap_or_default();
    let finish_reason = if finish_reason == FinishReason::Stop && content.is_empty() { FinishReason::Error } else { finish_reason };
    let usage = wire.usage.map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens }).unwrap_or_default();
    Ok(ChatResponse { content, finish_reason, usage })
}

pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .build()
            .into();
        Ok(HttpBackend { config, agent })
    }

    fn attempt(&self, body: &str) -> Attempt {
        let result = self
            .agent
            .post(&self.config.endpoint())
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .header("Content-Type", "application/json")
            .send(body);
        let mut response = match result {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match parse_body(&text) {
                Ok(r) => Attempt::Done(r),
                Err(e) => Attempt::Fatal(e),
            },
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}: {text}")),
            _ => Attempt::Fatal(LlmError::Protocol { status, body: text }),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let body = request_body(request);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.retry_backoff_s * 2f64.powi(attempt as i32 - 1);
                log::warn!("retrying chat completion in {delay:.2}s after: {last}");
                std::thread::sleep(Duration::from_secs_f64(delay));
            }
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(LlmError::Transport { attempts, message: last })
    }

    fn identity(&self) -> String {
        format!("http({})", self.config.endpoint())
    }
}
