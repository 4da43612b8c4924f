//! Chat-completion connector for remote agents.
//!
//! Requests are `POST`ed as JSON `{model, messages: [{role, content}], temperature, max_tokens}`.
//! The completion text is read from a configurable dotted path in the response
//! (`choices.0.message.content` by default). A bearer credential, when used, is
//! read from the environment variable named in the config and never logged.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::domain::LabelSpace;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;
pub const DEFAULT_RESPONSE_PATH: &str = "choices.0.message.content";
pub const DEFAULT_API_KEY_ENV: &str = "CSC_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConnectorError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned an empty completion")]
    EmptyResponse,
    #[error("unusable response: {0}")]
    BadResponse(String),
    #[error("connector misconfigured: {0}")]
    BadConfig(String),
}

impl ConnectorError {
    /// Timeouts and transport failures are retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ConnectorError::Timeout | ConnectorError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.to_string(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// One round trip to a chat endpoint, returning the raw completion text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, ConnectorError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorConfig {
    pub url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub response_path: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            response_path: DEFAULT_RESPONSE_PATH.to_string(),
            timeout_secs: 120.0,
            max_retries: 2,
            api_key_env: None,
        }
    }
}

impl ConnectorConfig {
    pub fn validate(&self) -> Result<(), ConnectorError> {
        if self.url.trim().is_empty() {
            return Err(ConnectorError::BadConfig("missing url".into()));
        }
        if self.model.trim().is_empty() {
            return Err(ConnectorError::BadConfig("missing model".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(ConnectorError::BadConfig(format!("timeout_secs must be positive, got {}", self.timeout_secs)));
        }
        if self.response_path.trim().is_empty() {
            return Err(ConnectorError::BadConfig("empty response_path".into()));
        }
        Ok(())
    }
}

/// Follows a dotted path (`choices.0.message.content`) into a JSON value.
pub fn extract_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, segment| match v {
        Value::Array(items) => segment.parse::<usize>().ok().and_then(|i| items.get(i)),
        Value::Object(map) => map.get(segment),
        _ => None,
    })
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    response_path: String,
    api_key: Option<String>,
}

impl std::fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpTransport")
            .field("url", &self.url)
            .field("response_path", &self.response_path)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpTransport {
    pub fn new(config: &ConnectorConfig) -> Result<Self, ConnectorError> {
        config.validate()?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| ConnectorError::BadConfig(format!("environment variable `{var}` is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ConnectorError::BadConfig(e.to_string()))?;
        Ok(Self { client, url: config.url.clone(), response_path: config.response_path.clone(), api_key })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, ConnectorError> {
        let body = serde_json::to_vec(request).map_err(|e| ConnectorError::BadConfig(e.to_string()))?;
        let mut builder = self.client.post(&self.url).header("content-type", "application/json").body(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                ConnectorError::Timeout
            } else {
                ConnectorError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let bytes = response.bytes().map_err(|e| {
            if e.is_timeout() {
                ConnectorError::Timeout
            } else {
                ConnectorError::Transport(e.to_string())
            }
        })?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ConnectorError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ConnectorError::BadResponse(format!("HTTP {status}")));
        }
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return Err(ConnectorError::EmptyResponse);
        }
        let json: Value =
            serde_json::from_slice(&bytes).map_err(|e| ConnectorError::BadResponse(format!("invalid JSON: {e}")))?;
        match extract_path(&json, &self.response_path) {
            Some(Value::String(text)) => Ok(text.clone()),
            Some(Value::Null) | None => Err(ConnectorError::BadResponse(format!(
                "no text at `{}`",
                self.response_path
            ))),
            Some(other) => Err(ConnectorError::BadResponse(format!(
                "`{}` is not a string: {other}",
                self.response_path
            ))),
        }
    }
}

/// A remote model reached through a [`ChatTransport`], with sampling settings and a retry budget.
#[derive(Debug)]
pub struct RemoteConnector<T: ChatTransport = HttpTransport> {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    transport: T,
}

impl RemoteConnector<HttpTransport> {
    pub fn from_config(config: &ConnectorConfig) -> Result<Self, ConnectorError> {
        Ok(Self::with_transport(config, HttpTransport::new(config)?))
    }
}

impl<T: ChatTransport> RemoteConnector<T> {
    pub fn with_transport(config: &ConnectorConfig, transport: T) -> Self {
        Self {
            model: config.model.clone(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            max_retries: config.max_retries,
            transport,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

pub const SYSTEM_PROMPT: &str = "You are one member of a panel answering a multiple-choice question. \
Think step by step inside <reasoning></reasoning> tags. Then, inside <answer></answer> tags, give a \
probability for every option in the form `LABEL: probability`, separated by commas. The probabilities \
must be between 0 and 1 and sum to 1.";

/// System and user messages for one agent turn.
pub fn build_prompt(question: &str, labels: &LabelSpace, peer_summary: &str) -> Vec<ChatMessage> {
    let mut user = format!("Question:\n{question}\n\nOptions: {}\n", labels.labels().join(", "));
    if !peer_summary.is_empty() {
        user.push_str("\nResponses from all panel members in the previous round:\n");
        user.push_str(peer_summary);
        user.push('\n');
    }
    user.push_str("\nReply with <reasoning>…</reasoning> followed by <answer>…</answer>.");
    vec![ChatMessage::new("system", SYSTEM_PROMPT), ChatMessage::new("user", user)]
}

/// Sends one agent turn, retrying timeouts and transport failures up to `max_retries` times.
pub fn remote_agent_respond<T: ChatTransport>(
    connector: &RemoteConnector<T>,
    question: &str,
    labels: &LabelSpace,
    peer_summary: &str,
) -> Result<String, ConnectorError> {
    let request = ChatRequest {
        model: connector.model.clone(),
        messages: build_prompt(question, labels, peer_summary),
        temperature: connector.temperature,
        max_tokens: connector.max_tokens,
    };
    let mut attempt = 0;
    loop {
        match connector.transport.send(&request) {
            Ok(text) if text.trim().is_empty() => return Err(ConnectorError::EmptyResponse),
            Ok(text) => {
                debug!(model = %connector.model, attempt, "completion received");
                return Ok(text);
            }
            Err(e) if e.is_retryable() && attempt < connector.max_retries => {
                warn!(model = %connector.model, attempt, error = %e, "retrying agent call");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
