//! Operator approval items and the gate abstraction the loop blocks on.

use std::collections::VecDeque;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CostQuote, TokenEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalKind {
    Prompt,
    Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalDecision {
    Approved,
    Denied,
}

/// What the loop asks the operator to decide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub item_id: String,
    pub kind: ApprovalKind,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quote: Option<CostQuote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<TokenEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactive_variant: Option<String>,
    pub model_id: String,
    /// Rendered cost table for prompt items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preview: Option<String>,
}

impl ApprovalRequest {
    pub fn prompt(
        item_id: &str,
        prompt_text: &str,
        estimate: Option<TokenEstimate>,
        quote: Option<CostQuote>,
        model_id: &str,
    ) -> Self {
        ApprovalRequest {
            item_id: item_id.to_string(),
            kind: ApprovalKind::Prompt,
            payload: prompt_text.to_string(),
            quote,
            estimate,
            rationale: None,
            interactive_variant: None,
            model_id: model_id.to_string(),
            preview: None,
        }
    }

    pub fn command(item_id: &str, command: &str, rationale: &str, interactive: &str, model_id: &str) -> Self {
        ApprovalRequest {
            item_id: item_id.to_string(),
            kind: ApprovalKind::Command,
            payload: command.to_string(),
            quote: None,
            estimate: None,
            rationale: Some(rationale.to_string()),
            interactive_variant: (!interactive.is_empty()).then(|| interactive.to_string()),
            model_id: model_id.to_string(),
            preview: None,
        }
    }
}

/// A request plus its lifecycle, as exposed over the control API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalItem {
    pub item_id: String,
    pub kind: ApprovalKind,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quote: Option<CostQuote>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<TokenEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interactive_variant: Option<String>,
    pub created_at: DateTime<Utc>,
    pub decision: Option<ApprovalDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_payload: Option<String>,
}

impl ApprovalItem {
    pub fn from_request(req: &ApprovalRequest, created_at: DateTime<Utc>) -> Self {
        ApprovalItem {
            item_id: req.item_id.clone(),
            kind: req.kind,
            payload: req.payload.clone(),
            quote: req.quote,
            estimate: req.estimate,
            rationale: req.rationale.clone(),
            interactive_variant: req.interactive_variant.clone(),
            created_at,
            decision: None,
            edited_payload: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateAnswer {
    pub decision: ApprovalDecision,
    /// Replacement command; ignored for prompt items.
    pub edited_payload: Option<String>,
}

impl GateAnswer {
    pub fn approve() -> Self {
        GateAnswer {
            decision: ApprovalDecision::Approved,
            edited_payload: None,
        }
    }

    pub fn deny() -> Self {
        GateAnswer {
            decision: ApprovalDecision::Denied,
            edited_payload: None,
        }
    }

    pub fn edit(command: impl Into<String>) -> Self {
        GateAnswer {
            decision: ApprovalDecision::Approved,
            edited_payload: Some(command.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GateError {
    #[error("approval channel closed")]
    Closed,
    #[error("session aborted by the operator")]
    Aborted,
}

pub trait ApprovalGate: Send {
    /// Blocks until the operator answers.
    fn decide(&mut self, request: &ApprovalRequest) -> Result<GateAnswer, GateError>;
}

impl<T: ApprovalGate + ?Sized> ApprovalGate for Box<T> {
    fn decide(&mut self, request: &ApprovalRequest) -> Result<GateAnswer, GateError> {
        (**self).decide(request)
    }
}

/// Approves everything; counts how often it was asked.
#[derive(Debug, Default)]
pub struct ApproveAll {
    pub consulted: usize,
}

impl ApprovalGate for ApproveAll {
    fn decide(&mut self, _: &ApprovalRequest) -> Result<GateAnswer, GateError> {
        self.consulted += 1;
        Ok(GateAnswer::approve())
    }
}

/// Answers from a fixed queue, recording every request. Once the queue is
/// empty the channel reports closed.
#[derive(Debug, Default)]
pub struct ScriptedGate {
    answers: VecDeque<Result<GateAnswer, GateError>>,
    seen: Vec<ApprovalRequest>,
}

impl ScriptedGate {
    pub fn new(answers: impl IntoIterator<Item = Result<GateAnswer, GateError>>) -> Self {
        ScriptedGate {
            answers: answers.into_iter().collect(),
            seen: Vec::new(),
        }
    }

    pub fn consulted(&self) -> usize {
        self.seen.len()
    }

    pub fn seen(&self) -> &[ApprovalRequest] {
        &self.seen
    }
}

impl ApprovalGate for ScriptedGate {
    fn decide(&mut self, request: &ApprovalRequest) -> Result<GateAnswer, GateError> {
        self.seen.push(request.clone());
        self.answers.pop_front().unwrap_or(Err(GateError::Closed))
    }
}
