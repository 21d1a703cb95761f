//! Live HTTP chat backend speaking the de-facto chat-completions protocol:
//! POST `{model, messages: [{role, content}], temperature, max_tokens}`,
//! image attachments as base64 data-URL content parts, reply text in
//! `choices[0].message.content`. Any conforming server works.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use base64::Engine;

use super::{
    with_retries, BackendError, ChatBackend, ChatRequest, ChatResponse, Part, RetryPolicy, Usage,
};

pub struct HttpChat {
    endpoint: String,
    auth_env: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl HttpChat {
    pub fn new(endpoint: impl Into<String>, auth_env: Option<String>, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.into(),
            auth_env,
            retry,
            client: reqwest::blocking::Client::new(),
            calls: AtomicU64::new(0),
        }
    }

    fn wire_body(request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| {
                let is_plain_text = m.parts.len() == 1 && matches!(m.parts[0], Part::Text(_));
                let content = if is_plain_text {
                    match &m.parts[0] {
                        Part::Text(t) => serde_json::Value::String(t.clone()),
                        Part::ImagePng(_) => unreachable!(),
                    }
                } else {
                    let parts: Vec<serde_json::Value> = m
                        .parts
                        .iter()
                        .map(|p| match p {
                            Part::Text(t) => serde_json::json!({ "type": "text", "text": t }),
                            Part::ImagePng(bytes) => {
                                let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
                                serde_json::json!({
                                    "type": "image_url",
                                    "image_url": { "url": format!("data:image/png;base64,{b64}") }
                                })
                            }
                        })
                        .collect();
                    serde_json::Value::Array(parts)
                };
                serde_json::json!({ "role": m.role.as_str(), "content": content })
            })
            .collect();
        serde_json::json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn auth_token(&self) -> Result<Option<String>, BackendError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) => Ok(Some(v)),
                Err(_) => Err(BackendError::Auth(format!(
                    "environment variable {var} is not set"
                ))),
            },
        }
    }

    fn call_once(&self, body: &serde_json::Value) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut builder = self.client.post(&self.endpoint).json(body);
        if let Some(token) = self.auth_token()? {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: e.to_string(),
        })?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(format!("server returned {status}")));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("server returned {status}"),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Malformed {
                message: format!("server returned {status}"),
                body: text,
            });
        }
        parse_chat_completion(&text)
    }
}

fn parse_chat_completion(body: &str) -> Result<ChatResponse, BackendError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| BackendError::Malformed {
            message: format!("reply is not JSON: {e}"),
            body: body.to_string(),
        })?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Malformed {
            message: "reply has no choices[0]".into(),
            body: body.to_string(),
        })?;
    let content = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| BackendError::Malformed {
            message: "reply has no choices[0].message.content".into(),
            body: body.to_string(),
        })?;
    let finish_reason = choice.get("finish_reason").and_then(|f| f.as_str());
    if content.is_empty() && finish_reason.is_none() {
        return Err(BackendError::Malformed {
            message: "empty content without a finish reason".into(),
            body: body.to_string(),
        });
    }
    let usage = value.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(|v| v.as_u64()).unwrap_or(0),
        completion_tokens: u
            .get("completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
    });
    Ok(ChatResponse {
        text: content.to_string(),
        usage,
        latency_ms: 0,
    })
}

impl ChatBackend for HttpChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request
            .validate()
            .map_err(|m| BackendError::Malformed {
                message: m,
                body: String::new(),
            })?;
        let body = Self::wire_body(request);
        let start = Instant::now();
        let mut response = with_retries(&self.retry, || self.call_once(&body))?;
        response.latency_ms = start.elapsed().as_millis() as u64;
        Ok(response)
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
