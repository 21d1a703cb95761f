//! Deterministic scripted chat backend for offline runs and tests.
//!
//! The script is a JSON file: either a bare array of entries or
//! `{"entries": [...]}`. Each entry carries a `response` and exactly one of:
//! - `"digest"`: the full request digest (as shown in traces) to match, or
//! - `"pattern"`: a glob (`*`/`?`) matched against the request's
//!   concatenated prompt text.
//!
//! Entries are tried in file order; the first match wins.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Deserialize;

use super::{glob_match, BackendError, BackendKind, ChatBackend, ChatRequest, ChatResponse};

#[derive(Debug, Clone, Deserialize)]
struct ScriptEntry {
    #[serde(default)]
    digest: Option<String>,
    #[serde(default)]
    pattern: Option<String>,
    response: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Wrapped { entries: Vec<ScriptEntry> },
    Bare(Vec<ScriptEntry>),
}

pub struct ScriptedChat {
    entries: Vec<ScriptEntry>,
    kind: BackendKind,
    calls: AtomicU64,
}

impl ScriptedChat {
    pub fn from_file(path: &Path, kind: BackendKind) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            BackendError::Script(format!("cannot read script {}: {e}", path.display()))
        })?;
        let parsed: ScriptFile = serde_json::from_str(&text).map_err(|e| {
            BackendError::Script(format!("bad script file {}: {e}", path.display()))
        })?;
        let entries = match parsed {
            ScriptFile::Wrapped { entries } => entries,
            ScriptFile::Bare(entries) => entries,
        };
        for (i, e) in entries.iter().enumerate() {
            if e.digest.is_none() == e.pattern.is_none() {
                return Err(BackendError::Script(format!(
                    "script entry {i}: exactly one of digest or pattern is required"
                )));
            }
        }
        Ok(Self {
            entries,
            kind,
            calls: AtomicU64::new(0),
        })
    }
}

impl ChatBackend for ScriptedChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.digest(self.kind);
        let prompt = request.prompt_text();
        for entry in &self.entries {
            let matched = match (&entry.digest, &entry.pattern) {
                (Some(d), _) => *d == digest,
                (_, Some(p)) => glob_match(p, &prompt),
                _ => false,
            };
            if matched {
                return Ok(ChatResponse {
                    text: entry.response.clone(),
                    usage: None,
                    latency_ms: 0,
                });
            }
        }
        Err(BackendError::Script(format!(
            "no scripted entry matches request digest {digest}"
        )))
    }

    fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
