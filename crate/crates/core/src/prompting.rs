//! Prompt construction and reply parsing for the three prompt families:
//! category extraction, grounding selection, and the VLM baseline prompts.
//!
//! Templates are versioned text files compiled into the crate; their wording
//! is part of the repo contract. All builders are deterministic: identical
//! inputs produce byte-identical prompts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ChatMessage, ChatRequest, Part};
use crate::scene::ObjectRecord;
use crate::BBox2D;

const CATEGORY_SYSTEM: &str = include_str!("../templates/category_system.txt");
const CATEGORY_USER: &str = include_str!("../templates/category_user.txt");
const GROUNDING_SYSTEM: &str = include_str!("../templates/grounding_system.txt");
const GROUNDING_QUESTION: &str = include_str!("../templates/grounding_question.txt");
const COT_INSTRUCTION: &str = include_str!("../templates/cot_instruction.txt");
const NAIVE_VLM_SYSTEM: &str = include_str!("../templates/naive_vlm_system.txt");
const CROPS_SYSTEM: &str = include_str!("../templates/crops_system.txt");
const BOXES_CAPTIONS_SYSTEM: &str = include_str!("../templates/boxes_captions_system.txt");
const DEFAULT_EXEMPLARS: &str = include_str!("../data/exemplars.json");

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("no bracketed list found in reply")]
    NoListFound { raw: String },
    #[error("bracketed list parsed to zero categories")]
    EmptyList { raw: String },
    #[error("no object id found in reply")]
    NoId { raw: String },
    #[error("object id {id} is not among the valid candidates")]
    IdOutOfRange { id: i64, raw: String },
    #[error("no bounding box found in reply")]
    NoBox { raw: String },
    #[error("bounding box in reply is invalid: {message}")]
    BadBox { message: String, raw: String },
    #[error("empty expression")]
    EmptyExpression,
}

/// Worked input-output example rendered into grounding prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub scene_records: Vec<String>,
    pub expression: String,
    pub answer_id: usize,
    pub rationale: String,
}

impl Exemplar {
    pub fn validate(&self) -> Result<(), String> {
        let ids = extract_record_ids(&self.scene_records.join("\n"));
        if !ids.contains(&(self.answer_id as i64)) {
            return Err(format!(
                "exemplar answer_id {} not among record ids {ids:?}",
                self.answer_id
            ));
        }
        Ok(())
    }
}

/// The two shipped exemplars: one spatial-relation case, one
/// attribute-disambiguation case.
pub fn default_exemplars() -> Vec<Exemplar> {
    let exemplars: Vec<Exemplar> =
        serde_json::from_str(DEFAULT_EXEMPLARS).expect("shipped exemplars parse");
    for e in &exemplars {
        e.validate().expect("shipped exemplars are valid");
    }
    exemplars
}

pub fn load_exemplars(path: &std::path::Path) -> Result<Vec<Exemplar>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read exemplars {}: {e}", path.display()))?;
    let exemplars: Vec<Exemplar> =
        serde_json::from_str(&text).map_err(|e| format!("bad exemplar file: {e}"))?;
    for e in &exemplars {
        e.validate()?;
    }
    Ok(exemplars)
}

/// Whether the grounding prompt asks for visible chain-of-thought reasoning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingMode {
    pub chain_of_thought: bool,
}

impl Default for GroundingMode {
    fn default() -> Self {
        Self {
            chain_of_thought: true,
        }
    }
}

/// All pieces of a grounding prompt before rendering into messages.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub exemplars: Vec<Exemplar>,
    pub scene_block: String,
    pub question_text: String,
    pub cot_instruction: Option<String>,
}

/// Single-turn request asking for a bracketed list of lowercase noun
/// categories mentioned in the expression.
pub fn build_category_prompt(model_name: &str, expression: &str) -> Result<ChatRequest, ParseError> {
    if expression.trim().is_empty() {
        return Err(ParseError::EmptyExpression);
    }
    let user = CATEGORY_USER.replace("{expression}", expression);
    Ok(ChatRequest::new(
        model_name,
        vec![ChatMessage::system(CATEGORY_SYSTEM), ChatMessage::user(user)],
    )
    .expect("static message structure"))
}

/// Extracts the first bracketed list, lowercases, strips quotes and
/// whitespace, and deduplicates preserving order.
pub fn parse_category_response(text: &str) -> Result<Vec<String>, ParseError> {
    let open = text.find('[').ok_or_else(|| ParseError::NoListFound {
        raw: text.to_string(),
    })?;
    let rest = &text[open + 1..];
    let close = rest.find(']').ok_or_else(|| ParseError::NoListFound {
        raw: text.to_string(),
    })?;
    let inner = &rest[..close];
    let mut seen = Vec::new();
    for item in inner.split(',') {
        let cleaned = item
            .trim()
            .trim_matches(|c| c == '"' || c == '\'' || c == '`')
            .trim()
            .to_lowercase();
        if !cleaned.is_empty() && !seen.contains(&cleaned) {
            seen.push(cleaned);
        }
    }
    if seen.is_empty() {
        return Err(ParseError::EmptyList {
            raw: text.to_string(),
        });
    }
    Ok(seen)
}

/// Doubles single quotes, keeping serialized lines close to the record
/// format's literal quoting.
fn escape_quotes(s: &str) -> String {
    s.replace('\'', "''")
}

/// One record line: `[id, 'name', 'caption', [x, y]]`, with z appended at
/// 0.1 m resolution when the record carries a 3D location.
pub fn serialize_record(record: &ObjectRecord) -> String {
    let (x, y) = record.location2d;
    let location = match record.location3d {
        Some(loc3d) => format!("[{x}, {y}, {:.1}]", loc3d[2]),
        None => format!("[{x}, {y}]"),
    };
    format!(
        "[{}, '{}', '{}', {}]",
        record.id,
        escape_quotes(&record.name),
        escape_quotes(&record.caption),
        location
    )
}

/// Parses the leading id of every record line in a scene block.
pub fn extract_record_ids(scene_block: &str) -> Vec<i64> {
    scene_block
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let rest = line.strip_prefix('[')?;
            let end = rest.find(',')?;
            rest[..end].trim().parse::<i64>().ok()
        })
        .collect()
}

fn render_exemplar(e: &Exemplar) -> String {
    format!(
        "Example:\nObjects:\n{}\nExpression: \"{}\"\nReasoning: {}\nANSWER: {}",
        e.scene_records.join("\n"),
        e.expression,
        e.rationale,
        e.answer_id
    )
}

/// Builds the grounding prompt bundle: system protocol, worked exemplars,
/// the serialized scene, the restated expression, and the chain-of-thought
/// instruction when the mode requests it.
pub fn build_grounding_bundle(
    records: &[ObjectRecord],
    expression: &str,
    exemplars: &[Exemplar],
    mode: GroundingMode,
) -> Result<PromptBundle, String> {
    if records.is_empty() {
        return Err("grounding prompt requires at least one record".into());
    }
    let mut sorted: Vec<&ObjectRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.id);
    let scene_block = sorted
        .iter()
        .map(|r| serialize_record(r))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(PromptBundle {
        system_text: GROUNDING_SYSTEM.to_string(),
        exemplars: exemplars.to_vec(),
        scene_block,
        question_text: GROUNDING_QUESTION.replace("{expression}", expression),
        cot_instruction: mode
            .chain_of_thought
            .then(|| COT_INSTRUCTION.to_string()),
    })
}

pub fn bundle_to_request(model_name: &str, bundle: &PromptBundle) -> ChatRequest {
    let mut user = String::new();
    for e in &bundle.exemplars {
        user.push_str(&render_exemplar(e));
        user.push_str("\n\n");
    }
    user.push_str("Objects:\n");
    user.push_str(&bundle.scene_block);
    user.push('\n');
    user.push_str(&bundle.question_text);
    if let Some(cot) = &bundle.cot_instruction {
        user.push('\n');
        user.push_str(cot);
    }
    ChatRequest::new(
        model_name,
        vec![
            ChatMessage::system(bundle.system_text.clone()),
            ChatMessage::user(user),
        ],
    )
    .expect("static message structure")
}

/// End-to-end convenience: records + expression + exemplars -> ChatRequest.
pub fn build_grounding_prompt(
    model_name: &str,
    records: &[ObjectRecord],
    expression: &str,
    exemplars: &[Exemplar],
    mode: GroundingMode,
) -> Result<ChatRequest, String> {
    let bundle = build_grounding_bundle(records, expression, exemplars, mode)?;
    Ok(bundle_to_request(model_name, &bundle))
}

/// Naive-VLM baseline: full image plus expression, expecting a bounding box
/// reply.
pub fn build_naive_vlm_prompt(model_name: &str, image_png: &[u8], expression: &str) -> ChatRequest {
    ChatRequest::new(
        model_name,
        vec![
            ChatMessage::system(NAIVE_VLM_SYSTEM),
            ChatMessage::user_parts(vec![
                Part::Text(format!("Command: \"{expression}\"")),
                Part::ImagePng(image_png.to_vec()),
            ]),
        ],
    )
    .expect("static message structure")
}

/// Crops baseline: numbered crops, expecting an id reply.
pub fn build_crops_prompt(
    model_name: &str,
    crops: &[(usize, Vec<u8>)],
    expression: &str,
) -> ChatRequest {
    let mut parts = vec![Part::Text(format!("Command: \"{expression}\""))];
    for (id, crop) in crops {
        parts.push(Part::Text(format!("Object {id}:")));
        parts.push(Part::ImagePng(crop.clone()));
    }
    ChatRequest::new(
        model_name,
        vec![ChatMessage::system(CROPS_SYSTEM), ChatMessage::user_parts(parts)],
    )
    .expect("static message structure")
}

/// Boxes+captions baseline: annotated full image plus one caption line per
/// candidate, expecting an id reply.
pub fn build_boxes_captions_prompt(
    model_name: &str,
    annotated_png: &[u8],
    caption_lines: &[String],
    expression: &str,
) -> ChatRequest {
    let text = format!(
        "Command: \"{expression}\"\nCandidates:\n{}",
        caption_lines.join("\n")
    );
    ChatRequest::new(
        model_name,
        vec![
            ChatMessage::system(BOXES_CAPTIONS_SYSTEM),
            ChatMessage::user_parts(vec![
                Part::Text(text),
                Part::ImagePng(annotated_png.to_vec()),
            ]),
        ],
    )
    .expect("static message structure")
}

fn parse_answer_line(line: &str) -> Option<i64> {
    let trimmed = line.trim();
    let rest = if trimmed.len() >= 7 && trimmed[..7].eq_ignore_ascii_case("answer:") {
        &trimmed[7..]
    } else {
        return None;
    };
    let token = rest.trim().trim_end_matches(['.', '!', ',']);
    token.parse::<i64>().ok()
}

/// Standalone integers in `text`, i.e. digit runs not adjacent to letters.
fn standalone_integers(text: &str) -> Vec<i64> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let before_ok = start == 0 || !chars[start - 1].is_alphanumeric();
            let after_ok = i >= chars.len() || !chars[i].is_alphanumeric();
            // skip decimals like 3.5 on either side
            let not_decimal = !(start >= 2
                && chars[start - 1] == '.'
                && chars[start - 2].is_ascii_digit())
                && !(i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit());
            if before_ok && after_ok && not_decimal {
                if let Ok(v) = chars[start..i].iter().collect::<String>().parse::<i64>() {
                    out.push(v);
                }
            }
        } else {
            i += 1;
        }
    }
    out
}

fn final_sentence(text: &str) -> &str {
    let trimmed = text.trim_end();
    let without_terminal = trimmed.trim_end_matches(['.', '!', '?']);
    let start = without_terminal
        .rfind(['.', '!', '?'])
        .map(|i| i + 1)
        .unwrap_or(0);
    &trimmed[start..]
}

/// Parses the chosen object id from an LLM grounding reply.
///
/// Priority: (1) the last line of the form `ANSWER: <int>`; (2) the last
/// standalone integer in the final sentence. The id must be in `valid_ids`.
pub fn parse_grounding_response(text: &str, valid_ids: &[usize]) -> Result<usize, ParseError> {
    assert!(!valid_ids.is_empty(), "valid_ids must be non-empty");
    let candidate = text
        .lines()
        .rev()
        .find_map(parse_answer_line)
        .or_else(|| standalone_integers(final_sentence(text)).last().copied());
    match candidate {
        None => Err(ParseError::NoId {
            raw: text.to_string(),
        }),
        Some(id) => {
            if id >= 0 && valid_ids.contains(&(id as usize)) {
                Ok(id as usize)
            } else {
                Err(ParseError::IdOutOfRange {
                    id,
                    raw: text.to_string(),
                })
            }
        }
    }
}

/// Parses a `[x1, y1, x2, y2]` pixel box from a naive-VLM reply.
pub fn parse_box_response(text: &str) -> Result<BBox2D, ParseError> {
    let mut search = text;
    loop {
        let open = search.find('[').ok_or_else(|| ParseError::NoBox {
            raw: text.to_string(),
        })?;
        let rest = &search[open + 1..];
        let close = match rest.find(']') {
            Some(c) => c,
            None => {
                return Err(ParseError::NoBox {
                    raw: text.to_string(),
                })
            }
        };
        let values: Vec<f64> = rest[..close]
            .split(',')
            .filter_map(|v| v.trim().parse::<f64>().ok())
            .collect();
        if values.len() == 4 {
            return BBox2D::new(values[0], values[1], values[2], values[3]).map_err(|e| {
                ParseError::BadBox {
                    message: e.to_string(),
                    raw: text.to_string(),
                }
            });
        }
        search = &rest[close + 1..];
    }
}
