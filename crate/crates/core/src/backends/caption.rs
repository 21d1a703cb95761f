//! VLM captioning of detection crops, built on top of any chat backend.
//!
//! The attribute-eliciting instruction is a versioned template shipped with
//! the crate; its wording is part of the repo contract. Captions longer than
//! [`CAPTION_MAX_WORDS`] words are cut back to a sentence boundary and the
//! truncation is flagged so it shows up in traces.

use std::sync::Arc;

use super::{BackendError, ChatBackend, ChatMessage, ChatRequest, Part};

/// Captions are bounded so ~20 records still fit a typical context budget.
pub const CAPTION_MAX_WORDS: usize = 60;

const INSTRUCTION_TEMPLATE: &str = include_str!("../../templates/caption_instruction.txt");

/// Fixed caption instruction for a given class label.
pub fn caption_instruction(label: &str) -> String {
    INSTRUCTION_TEMPLATE.replace("{label}", label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutcome {
    pub text: String,
    pub truncated: bool,
}

pub struct Captioner {
    chat: Arc<dyn ChatBackend>,
    model_name: String,
}

impl Captioner {
    pub fn new(chat: Arc<dyn ChatBackend>, model_name: impl Into<String>) -> Self {
        Self {
            chat,
            model_name: model_name.into(),
        }
    }

    /// Builds the caption request without sending it; exposed so callers can
    /// digest or trace the exact request.
    pub fn build_request(&self, crop_png: &[u8], label: &str) -> Result<ChatRequest, BackendError> {
        if crop_png.is_empty() {
            return Err(BackendError::Malformed {
                message: "caption requires a non-empty crop".into(),
                body: String::new(),
            });
        }
        let message = ChatMessage::user_parts(vec![
            Part::Text(caption_instruction(label)),
            Part::ImagePng(crop_png.to_vec()),
        ]);
        ChatRequest::new(self.model_name.clone(), vec![message]).map_err(|m| {
            BackendError::Malformed {
                message: m,
                body: String::new(),
            }
        })
    }

    pub fn caption(&self, crop_png: &[u8], label: &str) -> Result<CaptionOutcome, BackendError> {
        let request = self.build_request(crop_png, label)?;
        let response = self.chat.chat(&request)?;
        Ok(normalize_caption(&response.text, label))
    }

    pub fn call_count(&self) -> u64 {
        self.chat.call_count()
    }
}

/// Strips, falls back to a minimal `"a {label}"` caption for degenerate
/// replies, and enforces the word bound.
pub fn normalize_caption(raw: &str, label: &str) -> CaptionOutcome {
    let stripped = raw.trim();
    if stripped.is_empty() {
        return CaptionOutcome {
            text: format!("a {label}"),
            truncated: false,
        };
    }
    truncate_at_sentence(stripped, CAPTION_MAX_WORDS)
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Keeps whole sentences while the running word count stays within
/// `max_words`; hard-cuts mid-sentence only when the first sentence alone is
/// too long.
fn truncate_at_sentence(text: &str, max_words: usize) -> CaptionOutcome {
    if word_count(text) <= max_words {
        return CaptionOutcome {
            text: text.to_string(),
            truncated: false,
        };
    }
    let mut kept = String::new();
    let mut kept_words = 0usize;
    let mut sentence = String::new();
    for ch in text.chars() {
        sentence.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let words = word_count(&sentence);
            if kept_words + words > max_words {
                break;
            }
            kept.push_str(&sentence);
            kept_words += words;
            sentence.clear();
        }
    }
    if kept.is_empty() {
        // no usable sentence boundary: keep the first max_words words
        let cut: Vec<&str> = text.split_whitespace().take(max_words).collect();
        kept = cut.join(" ");
    }
    CaptionOutcome {
        text: kept.trim().to_string(),
        truncated: true,
    }
}
