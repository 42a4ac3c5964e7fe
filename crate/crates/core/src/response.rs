//! Parsing of the model's single-object JSON reply.
//!
//! Extraction is lenient (code fences and surrounding prose are tolerated) but
//! validation of the extracted object is strict.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::FeatureFlags;
use crate::ptt::PttUpdate;

pub const MAX_RATIONALE_CHARS: usize = 400;
pub const MAX_SUMMARY_BULLETS: usize = 10;
pub const MAX_HISTORY_LINES: usize = 15;
pub const MAX_RAG_QUERY_WORDS: usize = 15;

/// Shell metacharacters banned from the automated command.
pub const FORBIDDEN_CHARS: [char; 3] = ['$', '#', '`'];

const REQUIRED: [&str; 5] = [
    "command_non_interactive",
    "command_interactive",
    "system_summary",
    "command_history",
    "rationale",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmTurnResponse {
    pub command_non_interactive: String,
    pub command_interactive: String,
    pub system_summary: String,
    pub command_history: String,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag_search_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ptt_update: Option<PttUpdate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailureKind {
    NotJson,
    MultipleObjects,
    MissingField,
    LimitExceeded,
    ForbiddenChars,
    UnexpectedField,
}

impl ParseFailureKind {
    pub const ALL: [ParseFailureKind; 6] = [
        ParseFailureKind::NotJson,
        ParseFailureKind::MultipleObjects,
        ParseFailureKind::MissingField,
        ParseFailureKind::LimitExceeded,
        ParseFailureKind::ForbiddenChars,
        ParseFailureKind::UnexpectedField,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParseFailureKind::NotJson => "not_json",
            ParseFailureKind::MultipleObjects => "multiple_objects",
            ParseFailureKind::MissingField => "missing_field",
            ParseFailureKind::LimitExceeded => "limit_exceeded",
            ParseFailureKind::ForbiddenChars => "forbidden_chars",
            ParseFailureKind::UnexpectedField => "unexpected_field",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub detail: String,
}

impl ParseFailure {
    fn new(kind: ParseFailureKind, field: Option<&str>, detail: impl Into<String>) -> Self {
        ParseFailure {
            kind,
            field: field.map(str::to_string),
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{} ({}): {}", self.kind.as_str(), field, self.detail),
            None => write!(f, "{}: {}", self.kind.as_str(), self.detail),
        }
    }
}

impl std::error::Error for ParseFailure {}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Reject summary/history/query limit breaches instead of warning.
    pub strict_limits: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    pub response: LlmTurnResponse,
    /// Soft limit breaches accepted in lenient mode.
    pub warnings: Vec<String>,
}

pub fn parse_response(raw: &str, flags: &FeatureFlags) -> Result<LlmTurnResponse, ParseFailure> {
    parse_response_with(raw, flags, ParseOptions::default()).map(|p| p.response)
}

pub fn parse_response_with(
    raw: &str,
    flags: &FeatureFlags,
    opts: ParseOptions,
) -> Result<ParsedResponse, ParseFailure> {
    let object = extract_single_object(raw)?;
    validate(object, flags, opts)
}

fn strip_fences(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// End (exclusive) of the brace-balanced region starting at `start`, honouring
/// JSON string escapes. `None` when the region never closes.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn extract_single_object(raw: &str) -> Result<Map<String, Value>, ParseFailure> {
    let text = strip_fences(raw);
    let mut found: Vec<Map<String, Value>> = Vec::new();
    let mut pos = 0;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                found.push(map);
                pos = start + stream.byte_offset();
            }
            _ => match balanced_end(&text, start) {
                Some(end) => pos = end,
                None => break,
            },
        }
    }
    match found.len() {
        0 => Err(ParseFailure::new(
            ParseFailureKind::NotJson,
            None,
            "no JSON object found in the reply",
        )),
        1 => Ok(found.pop().expect("one object")),
        n => Err(ParseFailure::new(
            ParseFailureKind::MultipleObjects,
            None,
            format!("{n} top-level JSON objects found"),
        )),
    }
}

fn take_string(map: &mut Map<String, Value>, field: &str) -> Result<String, ParseFailure> {
    match map.remove(field) {
        None | Some(Value::Null) => Err(ParseFailure::new(
            ParseFailureKind::MissingField,
            Some(field),
            "required field absent",
        )),
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(ParseFailure::new(
            ParseFailureKind::MissingField,
            Some(field),
            format!("expected a string, found {}", json_type(&other)),
        )),
    }
}

fn json_type(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Positions of forbidden characters that sit outside balanced single quotes.
pub fn forbidden_chars_outside_quotes(command: &str) -> Vec<char> {
    let quotes = command.matches('\'').count();
    // An unmatched trailing quote protects nothing.
    let usable = quotes - quotes % 2;
    let mut seen_quotes = 0;
    let mut inside = false;
    let mut hits = Vec::new();
    for c in command.chars() {
        if c == '\'' {
            seen_quotes += 1;
            if seen_quotes <= usable {
                inside = !inside;
            }
            continue;
        }
        if !inside && FORBIDDEN_CHARS.contains(&c) {
            hits.push(c);
        }
    }
    hits
}

fn bullet_count(summary: &str) -> usize {
    summary.lines().filter(|l| !l.trim().is_empty()).count()
}

fn validate(
    mut map: Map<String, Value>,
    flags: &FeatureFlags,
    opts: ParseOptions,
) -> Result<ParsedResponse, ParseFailure> {
    use ParseFailureKind::*;

    let allowed_optional: Vec<&str> = [("rag_search_query", flags.rag), ("ptt_update", flags.ptt)]
        .into_iter()
        .filter(|(_, on)| *on)
        .map(|(k, _)| k)
        .collect();
    if let Some(extra) = map
        .keys()
        .find(|k| !REQUIRED.contains(&k.as_str()) && !allowed_optional.contains(&k.as_str()))
    {
        let why = match extra.as_str() {
            "rag_search_query" => "retrieval is not enabled for this run",
            "ptt_update" => "task-tree tracking is not enabled for this run",
            _ => "not part of the output format",
        };
        return Err(ParseFailure::new(UnexpectedField, Some(extra), why));
    }

    let command_non_interactive = take_string(&mut map, "command_non_interactive")?;
    let command_interactive = take_string(&mut map, "command_interactive")?;
    let system_summary = take_string(&mut map, "system_summary")?;
    let command_history = take_string(&mut map, "command_history")?;
    let rationale = take_string(&mut map, "rationale")?;

    let rag_search_query = if flags.rag {
        Some(take_string(&mut map, "rag_search_query")?)
    } else {
        None
    };
    let ptt_update = if flags.ptt {
        match map.remove("ptt_update") {
            None | Some(Value::Null) => {
                return Err(ParseFailure::new(MissingField, Some("ptt_update"), "required field absent"))
            }
            Some(v) => Some(serde_json::from_value::<PttUpdate>(v).map_err(|e| {
                ParseFailure::new(UnexpectedField, Some("ptt_update"), format!("malformed ptt_update: {e}"))
            })?),
        }
    } else {
        None
    };

    if command_non_interactive.trim().is_empty() {
        return Err(ParseFailure::new(
            MissingField,
            Some("command_non_interactive"),
            "command is empty",
        ));
    }
    let hits = forbidden_chars_outside_quotes(&command_non_interactive);
    if !hits.is_empty() {
        let listed: String = hits.iter().collect();
        return Err(ParseFailure::new(
            ForbiddenChars,
            Some("command_non_interactive"),
            format!("contains {listed:?} outside single quotes"),
        ));
    }
    let rationale_len = rationale.chars().count();
    if rationale_len > MAX_RATIONALE_CHARS {
        return Err(ParseFailure::new(
            LimitExceeded,
            Some("rationale"),
            format!("{rationale_len} characters, limit {MAX_RATIONALE_CHARS}"),
        ));
    }

    let mut soft = Vec::new();
    let bullets = bullet_count(&system_summary);
    if bullets > MAX_SUMMARY_BULLETS {
        soft.push(("system_summary", format!("{bullets} bullet points, limit {MAX_SUMMARY_BULLETS}")));
    }
    let lines = command_history.lines().count();
    if lines > MAX_HISTORY_LINES {
        soft.push(("command_history", format!("{lines} lines, limit {MAX_HISTORY_LINES}")));
    }
    if let Some(q) = &rag_search_query {
        let words = q.split_whitespace().count();
        if words > MAX_RAG_QUERY_WORDS {
            soft.push(("rag_search_query", format!("{words} words, limit {MAX_RAG_QUERY_WORDS}")));
        }
    }
    if opts.strict_limits {
        if let Some((field, detail)) = soft.first() {
            return Err(ParseFailure::new(LimitExceeded, Some(field), detail.clone()));
        }
    }

    Ok(ParsedResponse {
        response: LlmTurnResponse {
            command_non_interactive,
            command_interactive,
            system_summary,
            command_history,
            rationale,
            rag_search_query,
            ptt_update,
        },
        warnings: soft.into_iter().map(|(f, d)| format!("{f}: {d}")).collect(),
    })
}

/// Corrective paragraph appended to the next prompt after a failed reply.
pub fn remediation_prompt(failure: &ParseFailure) -> String {
    let field = failure.field.as_deref().unwrap_or("");
    let body = match failure.kind {
        ParseFailureKind::NotJson => {
            "Your previous reply could not be read as JSON. Respond with a single, valid JSON object only, with no prose before or after it.".to_string()
        }
        ParseFailureKind::MultipleObjects => {
            "Your previous reply contained more than one JSON object. Respond with exactly one compact JSON object.".to_string()
        }
        ParseFailureKind::MissingField => format!(
            "Your previous reply was missing the required field \"{field}\" or it was not a non-empty string. Include every field of the output format."
        ),
        ParseFailureKind::LimitExceeded => {
            let rule = match field {
                "system_summary" => format!("\"system_summary\" allows a max of {MAX_SUMMARY_BULLETS} very short bullet points"),
                "command_history" => format!("\"command_history\" allows a max of {MAX_HISTORY_LINES} lines, summarised cleanly"),
                "rag_search_query" => format!("\"rag_search_query\" allows a max of {MAX_RAG_QUERY_WORDS} words"),
                _ => format!("\"rationale\" must be 1-2 sentences, at most {MAX_RATIONALE_CHARS} characters"),
            };
            format!("Your previous reply exceeded a size limit: {rule}. Shorten it.")
        }
        ParseFailureKind::ForbiddenChars => {
            "Your previous command_non_interactive broke the rule: safe for automated execution (no $, #, `). Rewrite the command without these characters outside single quotes.".to_string()
        }
        ParseFailureKind::UnexpectedField => format!(
            "Your previous reply contained the field \"{field}\", which is not part of the output format for this run. Use only the listed fields."
        ),
    };
    format!("{body} (Detail: {})", failure.detail)
}
