//! Uniform contracts for the three external model roles — chat (LLM),
//! caption (VLM) and detect — plus the machinery shared by every
//! implementation: request/response types, error taxonomy, retries, request
//! digests, and glob matching for scripted backends.
//!
//! Backends are replaceable endpoints by design; the pipeline never assumes
//! specific weights. Live HTTP, precomputed files, and deterministic scripted
//! stand-ins all satisfy the same traits, and a content-addressed disk cache
//! can sit in front of any of them.

pub mod cache;
pub mod caption;
pub mod detect;
pub mod http;
pub mod scripted;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CachedChat, DiskCache};
pub use caption::{Captioner, CAPTION_MAX_WORDS};
pub use detect::{filter_detections, DetectBackend, FileDetections, HttpDetector};
pub use http::HttpChat;
pub use scripted::ScriptedChat;

#[derive(Debug, Error)]
pub enum BackendError {
    /// Retryable transport failure that exhausted its retry budget.
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    /// Authentication rejected; retrying cannot help.
    #[error("authentication failed: {0}")]
    Auth(String),
    /// The backend replied but the reply does not conform to the protocol.
    /// The raw body is preserved for the trace.
    #[error("malformed backend reply: {message}")]
    Malformed { message: String, body: String },
    /// Scripted backend could not serve the request (bad script file or no
    /// matching entry).
    #[error("scripted backend: {0}")]
    Script(String),
    #[error("backend I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Errors that a retry loop may attempt again.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Chat,
    Caption,
    Detect,
}

impl BackendKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackendKind::Chat => "chat",
            BackendKind::Caption => "caption",
            BackendKind::Detect => "detect",
        }
    }
}

/// Where a backend lives: exactly one of a live endpoint URL or a script /
/// precomputed file path. Auth is referenced by environment-variable name;
/// the secret itself never enters configs, traces or caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), String> {
        match (&self.endpoint, &self.script) {
            (Some(_), Some(_)) => Err(format!(
                "{} backend: endpoint and script are mutually exclusive",
                self.kind.as_str()
            )),
            (None, None) => Err(format!(
                "{} backend: one of endpoint or script is required",
                self.kind.as_str()
            )),
            _ => Ok(()),
        }
    }

    pub fn scripted(kind: BackendKind, script: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            endpoint: None,
            script: Some(script.into()),
            model_name: "scripted".into(),
            auth_env: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One piece of message content: text or an attached PNG image.
#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    ImagePng(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn user_parts(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Result<Self, String> {
        let req = Self {
            model_name: model_name.into(),
            messages,
            temperature: 0.0,
            max_tokens: 2048,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err("chat request needs at least one user message".into());
        }
        if self.temperature < 0.0 {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        Ok(())
    }

    /// All text content joined with newlines, in message order. Scripted
    /// backends match glob patterns against this.
    pub fn prompt_text(&self) -> String {
        let mut out = String::new();
        for m in &self.messages {
            for p in &m.parts {
                if let Part::Text(t) = p {
                    if !out.is_empty() {
                        out.push('\n');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }

    /// Canonical JSON for digesting: attached images are replaced by their
    /// SHA-256 so the digest depends on content, not encoding order.
    fn canonical_json(&self, kind: BackendKind) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = self
            .messages
            .iter()
            .map(|m| {
                let parts: Vec<serde_json::Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        Part::Text(t) => serde_json::json!({ "text": t }),
                        Part::ImagePng(bytes) => {
                            serde_json::json!({ "image_sha256": sha256_hex(bytes) })
                        }
                    })
                    .collect();
                serde_json::json!({ "role": m.role.as_str(), "parts": parts })
            })
            .collect();
        serde_json::json!({
            "kind": kind.as_str(),
            "model": self.model_name,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }

    /// Content-addressed digest of the logical request; doubles as the
    /// cache key. Any payload difference changes it.
    pub fn digest(&self, kind: BackendKind) -> String {
        sha256_hex(self.canonical_json(kind).to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    #[serde(default)]
    pub latency_ms: u64,
}

/// Text-in/text-out model accessed uniformly; also carries images for
/// VLM-style requests.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Number of underlying invocations performed (cache hits do not count).
    fn call_count(&self) -> u64;
}

/// At most `max_attempts` tries with exponential backoff between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_ms: 1000,
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.base_ms as f64 * self.factor.powi(attempt as i32);
        Duration::from_millis(ms as u64)
    }
}

/// Runs `op` under the retry policy. Only retryable errors are retried; the
/// final error carries the attempt count.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let mut last_message = String::new();
    for attempt in 0..policy.max_attempts {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() => {
                last_message = e.to_string();
                if attempt + 1 < policy.max_attempts {
                    std::thread::sleep(policy.backoff(attempt));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(BackendError::Transport {
        attempts: policy.max_attempts,
        message: last_message,
    })
}

/// Glob match with `*` (any run of characters, including newlines) and `?`
/// (any single character). Used for scripted-backend prompt patterns.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    // iterative wildcard matching with backtracking on the last '*'
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star, mut mark) = (None::<usize>, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = Some(pi);
            mark = ti;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            ti = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}
