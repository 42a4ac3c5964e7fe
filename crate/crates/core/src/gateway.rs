//! Token estimation, cost quotes, the pre-submission approval gate and model
//! transports.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approval::{ApprovalDecision, ApprovalGate, ApprovalKind, ApprovalRequest, GateError};
use crate::config::ApprovalMode;
use crate::money::{MoneyError, TokenRate, Usd};

/// Tokens per word, as a ratio of integers: 1.33 = 133 / 100.
pub const TOKENS_PER_WORD: (u64, u64) = (133, 100);
/// Predicted completion size relative to the prompt: 40 %.
pub const COMPLETION_RATIO: (u64, u64) = (40, 100);

pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
/// Per-million prices shipped in the built-in table: (model, input, output).
pub const BUILTIN_RATES: [(&str, &str, &str); 1] = [(DEFAULT_MODEL, "0.15", "0.60")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub model_id: String,
    pub input_rate: TokenRate,
    pub output_rate: TokenRate,
}

impl CostModel {
    pub fn new(model_id: impl Into<String>, input_rate: TokenRate, output_rate: TokenRate) -> Result<Self, GatewayError> {
        let model_id = model_id.into();
        if !input_rate.is_positive() || !output_rate.is_positive() {
            return Err(GatewayError::NonPositiveRate(model_id));
        }
        Ok(CostModel {
            model_id,
            input_rate,
            output_rate,
        })
    }

    pub fn gpt_4o_mini() -> Self {
        RateTable::builtin().lookup(DEFAULT_MODEL).expect("builtin model")
    }

    pub fn input_cost(&self, tokens: u64) -> Usd {
        self.input_rate.cost(tokens)
    }

    pub fn output_cost(&self, tokens: u64) -> Usd {
        self.output_rate.cost(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RateTable {
    models: BTreeMap<String, (TokenRate, TokenRate)>,
}

impl RateTable {
    pub fn builtin() -> Self {
        let mut t = RateTable::default();
        for (model, input, output) in BUILTIN_RATES {
            let i = TokenRate::parse_per_million(input).expect("builtin rate");
            let o = TokenRate::parse_per_million(output).expect("builtin rate");
            t.models.insert(model.to_string(), (i, o));
        }
        t
    }

    /// Rates file: `model_id input_per_million output_per_million` per line,
    /// `#` comments. Entries override the built-in table.
    pub fn with_rates_text(mut self, text: &str) -> Result<Self, GatewayError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [model, input, output] = parts[..] else {
                return Err(GatewayError::RatesSyntax {
                    line: n + 1,
                    reason: "expected: model input_per_million output_per_million".into(),
                });
            };
            let parse = |s: &str| {
                TokenRate::parse_per_million(s.trim_start_matches('$')).map_err(|e: MoneyError| GatewayError::RatesSyntax {
                    line: n + 1,
                    reason: e.to_string(),
                })
            };
            let (i, o) = (parse(input)?, parse(output)?);
            if !i.is_positive() || !o.is_positive() {
                return Err(GatewayError::NonPositiveRate(model.to_string()));
            }
            self.models.insert(model.to_string(), (i, o));
        }
        Ok(self)
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::RatesIo(format!("{}: {e}", path.display())))?;
        RateTable::builtin().with_rates_text(&text)
    }

    pub fn lookup(&self, model_id: &str) -> Result<CostModel, GatewayError> {
        let (i, o) = self
            .models
            .get(model_id)
            .ok_or_else(|| GatewayError::UnknownModel(model_id.to_string()))?;
        CostModel::new(model_id, *i, *o)
    }

    pub fn models(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenEstimate {
    pub word_count: u64,
    pub prompt_tokens: u64,
    pub predicted_completion_tokens: u64,
}

impl TokenEstimate {
    pub fn from_words(word_count: u64) -> Self {
        let prompt_tokens = word_count * TOKENS_PER_WORD.0 / TOKENS_PER_WORD.1;
        TokenEstimate {
            word_count,
            prompt_tokens,
            predicted_completion_tokens: prompt_tokens * COMPLETION_RATIO.0 / COMPLETION_RATIO.1,
        }
    }
}

pub fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostQuote {
    pub input_cost: Usd,
    pub predicted_output_cost: Usd,
    pub total: Usd,
}

impl CostQuote {
    pub fn for_tokens(model: &CostModel, prompt_tokens: u64, completion_tokens: u64) -> Self {
        let input_cost = model.input_cost(prompt_tokens);
        let predicted_output_cost = model.output_cost(completion_tokens);
        CostQuote {
            input_cost,
            predicted_output_cost,
            total: input_cost + predicted_output_cost,
        }
    }
}

pub fn estimate(prompt_text: &str, model: &CostModel) -> (TokenEstimate, CostQuote) {
    let est = TokenEstimate::from_words(word_count(prompt_text));
    let quote = CostQuote::for_tokens(model, est.prompt_tokens, est.predicted_completion_tokens);
    (est, quote)
}

/// Table shown to the operator before a prompt is sent.
pub fn render_quote_table(model_id: &str, est: &TokenEstimate, quote: &CostQuote) -> String {
    let rows = [
        ("Model", model_id.to_string()),
        ("Words", est.word_count.to_string()),
        ("Prompt tokens (est.)", est.prompt_tokens.to_string()),
        ("Completion tokens (est.)", est.predicted_completion_tokens.to_string()),
        ("Input cost", format!("${}", quote.input_cost)),
        ("Output cost (est.)", format!("${}", quote.predicted_output_cost)),
        ("Total (est.)", format!("${}", quote.total)),
    ];
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let v = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let sep = format!("+-{}-+-{}-+", "-".repeat(w), "-".repeat(v));
    let mut out = vec![sep.clone()];
    for (k, val) in rows {
        out.push(format!("| {k:<w$} | {val:>v$} |"));
    }
    out.push(sep);
    out.join("\n")
}

/// Cost gate in front of every completion call. In auto-approve mode the gate
/// is never consulted.
pub fn request_approval(
    request: &ApprovalRequest,
    mode: ApprovalMode,
    gate: &mut dyn ApprovalGate,
) -> Result<ApprovalDecision, GateError> {
    debug_assert_eq!(request.kind, ApprovalKind::Prompt);
    if mode == ApprovalMode::AutoApprove {
        return Ok(ApprovalDecision::Approved);
    }
    if let Some(table) = &request.preview {
        log::info!("prompt cost preview for {}\n{table}", request.item_id);
    }
    match gate.decide(request) {
        Ok(answer) => Ok(answer.decision),
        Err(GateError::Closed) => Ok(ApprovalDecision::Denied),
        Err(other) => Err(other),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub system: String,
    pub user: String,
}

impl CompletionRequest {
    pub const SYSTEM_MESSAGE: &'static str =
        "You are a careful Linux privilege-escalation assistant. Reply with a single valid JSON object only.";

    pub fn new(model_id: &str, prompt_text: &str) -> Self {
        CompletionRequest {
            model_id: model_id.to_string(),
            system: Self::SYSTEM_MESSAGE.to_string(),
            user: prompt_text.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportReply {
    pub text: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("network failure: {0}")]
    Network(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("scripted transport exhausted after {0} responses")]
    Exhausted(usize),
}

pub trait ModelTransport: Send {
    fn send(&mut self, request: &CompletionRequest) -> Result<TransportReply, TransportError>;
}

impl<T: ModelTransport + ?Sized> ModelTransport for Box<T> {
    fn send(&mut self, request: &CompletionRequest) -> Result<TransportReply, TransportError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScriptEntry {
    Text(String),
    Full(TransportReply),
}

/// Replays canned replies in order. Running past the end is an error.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTransport {
    queue: VecDeque<TransportReply>,
    served: usize,
    requests: Vec<CompletionRequest>,
}

impl ScriptedTransport {
    pub fn new(replies: impl IntoIterator<Item = TransportReply>) -> Self {
        ScriptedTransport {
            queue: replies.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| TransportReply {
            text: t.into(),
            usage: None,
        }))
    }

    /// JSON array of strings or `{text, usage}` objects.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text)?;
        Ok(Self::new(entries.into_iter().map(|e| match e {
            ScriptEntry::Text(text) => TransportReply { text, usage: None },
            ScriptEntry::Full(r) => r,
        })))
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }

    pub fn served(&self) -> usize {
        self.served
    }

    pub fn requests(&self) -> &[CompletionRequest] {
        &self.requests
    }
}

impl ModelTransport for ScriptedTransport {
    fn send(&mut self, request: &CompletionRequest) -> Result<TransportReply, TransportError> {
        self.requests.push(request.clone());
        let reply = self.queue.pop_front().ok_or(TransportError::Exhausted(self.served))?;
        self.served += 1;
        Ok(reply)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub usage: Usage,
    pub usage_reported: bool,
    pub input_cost: Usd,
    pub output_cost: Usd,
    pub actual_cost: Usd,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("model returned an empty response")]
    EmptyResponse,
    #[error("no rates known for model {0:?}")]
    UnknownModel(String),
    #[error("rates for {0:?} must be positive")]
    NonPositiveRate(String),
    #[error("rates file line {line}: {reason}")]
    RatesSyntax { line: usize, reason: String },
    #[error("cannot read rates file: {0}")]
    RatesIo(String),
    #[error("cannot load scripted responses: {0}")]
    Script(String),
}

/// Sends an already-approved prompt. Cost uses provider usage when reported,
/// else the pre-submission estimate.
pub fn complete(
    prompt_text: &str,
    transport: &mut dyn ModelTransport,
    model: &CostModel,
    estimate: &TokenEstimate,
) -> Result<Completion, GatewayError> {
    let reply = transport.send(&CompletionRequest::new(&model.model_id, prompt_text))?;
    let (usage, usage_reported) = match reply.usage {
        Some(u) => (u, true),
        None => (
            Usage {
                prompt_tokens: estimate.prompt_tokens,
                completion_tokens: estimate.predicted_completion_tokens,
            },
            false,
        ),
    };
    if reply.text.trim().is_empty() {
        return Err(GatewayError::EmptyResponse);
    }
    let input_cost = model.input_cost(usage.prompt_tokens);
    let output_cost = model.output_cost(usage.completion_tokens);
    Ok(Completion {
        raw_text: reply.text,
        usage,
        usage_reported,
        input_cost,
        output_cost,
        actual_cost: input_cost + output_cost,
    })
}
