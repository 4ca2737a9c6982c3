//! Extraction and validation of the JSON verdict a model emits for one
//! image pair.
//!
//! Models do not always honour the "raw JSON only" instruction: replies
//! arrive wrapped in markdown fences or padded with prose. Extraction takes
//! the first fenced block when one exists, otherwise the first balanced
//! `{...}` span, and validation then enforces the score contract.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Key carrying the numeric verdict. Matched exactly.
pub const SCORE_KEY: &str = "similarity_score";

/// A validated model verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub similarity_score: f64,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub key_matching_objects: Vec<String>,
    #[serde(default)]
    pub key_mismatched_objects: Vec<String>,
}

/// Why a raw reply could not be turned into a [`ScoredResponse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(tag = "kind", content = "detail")]
pub enum ParseFailure {
    #[error("no JSON object found")]
    NoJsonFound,
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing `similarity_score`")]
    MissingScore,
    #[error("`similarity_score` is not a number")]
    NonNumericScore,
    #[error("`similarity_score` {0} outside [0, 1]")]
    OutOfRangeScore(f64),
    /// The request itself failed, so there is no text to parse.
    #[error("transport failure: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseStatus {
    Valid(ScoredResponse),
    Invalid(ParseFailure),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub status: ParseStatus,
    pub raw_text: String,
}

impl ParseOutcome {
    /// Outcome for a request that never produced text.
    pub fn transport_failure(reason: impl Into<String>) -> Self {
        ParseOutcome {
            status: ParseStatus::Invalid(ParseFailure::Transport(reason.into())),
            raw_text: String::new(),
        }
    }

    pub fn score(&self) -> Option<f64> {
        match &self.status {
            ParseStatus::Valid(r) => Some(r.similarity_score),
            ParseStatus::Invalid(_) => None,
        }
    }

    pub fn response(&self) -> Option<&ScoredResponse> {
        match &self.status {
            ParseStatus::Valid(r) => Some(r),
            ParseStatus::Invalid(_) => None,
        }
    }

    pub fn failure(&self) -> Option<&ParseFailure> {
        match &self.status {
            ParseStatus::Valid(_) => None,
            ParseStatus::Invalid(f) => Some(f),
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self.status, ParseStatus::Valid(_))
    }
}

/// Returns the candidate JSON text inside `raw`.
pub fn extract_json_block(raw: &str) -> Result<&str, ParseFailure> {
    if let Some(block) = first_fenced_block(raw) {
        return Ok(block);
    }
    first_balanced_object(raw).ok_or(ParseFailure::NoJsonFound)
}

/// Content of the first complete ``` fenced block, with the info string
/// (e.g. `json`) dropped and surrounding whitespace trimmed.
fn first_fenced_block(raw: &str) -> Option<&str> {
    let open = raw.find("```")?;
    let after = &raw[open + 3..];
    // The info string runs to the end of the opening line.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(body[..close].trim())
}

/// First `{` that opens a span whose braces balance, skipping braces inside
/// JSON string literals.
fn first_balanced_object(raw: &str) -> Option<&str> {
    let bytes = raw.as_bytes();
    let mut start = 0;
    while let Some(off) = raw[start..].find('{') {
        let open = start + off;
        if let Some(end) = balanced_end(bytes, open) {
            return Some(&raw[open..=end]);
        }
        start = open + 1;
    }
    None
}

fn balanced_end(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Extracts, parses and validates one raw model reply. Never panics.
pub fn parse_scored_response(raw: &str) -> ParseOutcome {
    let status = match validate(raw) {
        Ok(r) => ParseStatus::Valid(r),
        Err(f) => ParseStatus::Invalid(f),
    };
    ParseOutcome {
        status,
        raw_text: raw.to_owned(),
    }
}

fn validate(raw: &str) -> Result<ScoredResponse, ParseFailure> {
    let block = extract_json_block(raw)?;
    let value: Value =
        serde_json::from_str(block).map_err(|e| ParseFailure::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(ParseFailure::MalformedJson("top-level value is not an object".into()));
    };
    let score = match obj.get(SCORE_KEY) {
        None | Some(Value::Null) => return Err(ParseFailure::MissingScore),
        Some(Value::Number(n)) => n.as_f64().ok_or(ParseFailure::NonNumericScore)?,
        Some(_) => return Err(ParseFailure::NonNumericScore),
    };
    if !(0.0..=1.0).contains(&score) {
        return Err(ParseFailure::OutOfRangeScore(score));
    }
    Ok(ScoredResponse {
        similarity_score: score,
        justification: optional_string(&obj, "justification")?,
        key_matching_objects: optional_list(&obj, "key_matching_objects")?,
        key_mismatched_objects: optional_list(&obj, "key_mismatched_objects")?,
    })
}

fn optional_string(obj: &Map<String, Value>, key: &str) -> Result<String, ParseFailure> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ParseFailure::MalformedJson(format!("`{key}` is not a string"))),
    }
}

fn optional_list(obj: &Map<String, Value>, key: &str) -> Result<Vec<String>, ParseFailure> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                _ => Err(ParseFailure::MalformedJson(format!("`{key}` holds a non-string item"))),
            })
            .collect(),
        Some(_) => Err(ParseFailure::MalformedJson(format!("`{key}` is not a list"))),
    }
}
