//! End-of-session artifacts: a markdown report and a cost summary.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::money::Usd;
use crate::session::{SessionError, SessionHandle, SessionOutcome, TerminationReason, TurnRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCost {
    pub turn_index: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub usage_reported: bool,
    pub estimated_cost: Usd,
    pub input_cost: Usd,
    pub output_cost: Usd,
    pub actual_cost: Usd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostSummary {
    pub session_id: String,
    pub model_id: String,
    pub configuration: String,
    pub turns_used: u32,
    pub turns: Vec<TurnCost>,
    pub total_estimated: Usd,
    pub total_cost: Usd,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportArtifacts {
    pub report_md: PathBuf,
    pub cost_summary_json: PathBuf,
}

pub fn cost_summary(session_id: &str, model_id: &str, configuration: &str, turns: &[TurnRecord]) -> CostSummary {
    let rows: Vec<TurnCost> = turns
        .iter()
        .map(|t| TurnCost {
            turn_index: t.turn_index,
            prompt_tokens: t.actual_prompt_tokens,
            completion_tokens: t.actual_completion_tokens,
            usage_reported: t.usage_reported,
            estimated_cost: t.cost_estimate,
            input_cost: t.actual_input_cost,
            output_cost: t.actual_output_cost,
            actual_cost: t.actual_cost,
        })
        .collect();
    CostSummary {
        session_id: session_id.to_string(),
        model_id: model_id.to_string(),
        configuration: configuration.to_string(),
        turns_used: rows.len() as u32,
        total_estimated: rows.iter().map(|r| r.estimated_cost).sum(),
        total_cost: rows.iter().map(|r| r.actual_cost).sum(),
        turns: rows,
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn outcome_note(outcome: &SessionOutcome, turns: &[TurnRecord]) -> String {
    match outcome.termination_reason {
        TerminationReason::AutoRoot => "Auto-root detected; terminated early".to_string(),
        TerminationReason::MaxTurns => "Turn limit reached without root evidence".to_string(),
        TerminationReason::UserAbort => "Aborted by the operator".to_string(),
        TerminationReason::FatalError => {
            let why = turns.iter().rev().find_map(|t| t.fatal_error.clone()).unwrap_or_default();
            format!("Fatal error: {why}")
        }
    }
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

pub fn render_report(session_id: &str, configuration: &str, outcome: &SessionOutcome, turns: &[TurnRecord]) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Session {session_id}\n");
    md.push_str("| Config | Root | Auto-Root | Turns | Notes |\n|---|---|---|---|---|\n");
    let _ = writeln!(
        md,
        "| {} | {} | {} | {} | {} |\n",
        cell(configuration),
        yes_no(outcome.root_achieved),
        yes_no(outcome.auto_root_detected),
        outcome.turns_used,
        cell(&outcome_note(outcome, turns))
    );
    md.push_str("| Configuration | Turns | Total Cost (USD) |\n|---|---|---|\n");
    let _ = writeln!(md, "| {} | {} | ${} |\n", cell(configuration), outcome.turns_used, outcome.total_cost);
    md.push_str("## Turns\n\n| Turn | Command | Verdict | Exit | Root | Cost (USD) |\n|---|---|---|---|---|---|\n");
    for t in turns {
        let verdict = if !t.prompt_approved {
            "prompt denied".to_string()
        } else if let Some(f) = &t.parse_failure {
            format!("parse failure: {}", f.kind.as_str())
        } else if t.voided {
            format!("voided: {}", t.safety_verdict.matched_rule.clone().unwrap_or_default())
        } else if t.fatal_error.is_some() {
            "fatal".to_string()
        } else if !t.command_approved {
            "command denied".to_string()
        } else if t.timed_out {
            "timed out".to_string()
        } else {
            "executed".to_string()
        };
        let command = t
            .executed_command
            .clone()
            .or_else(|| t.parsed.as_ref().map(|p| p.command_non_interactive.clone()))
            .unwrap_or_default();
        let exit = t.exit_status.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            md,
            "| {} | `{}` | {} | {} | {} | ${} |",
            t.turn_index,
            cell(&command),
            cell(&verdict),
            exit,
            yes_no(t.root_verdict.is_root),
            t.actual_cost
        );
    }
    md
}

/// Writes `report.md` and `cost_summary.json` into the session directory.
pub fn emit_report(session: &SessionHandle) -> Result<ReportArtifacts, SessionError> {
    let config = session.config();
    let configuration = config.flags.label();
    let outcome = session.outcome();
    let summary = cost_summary(session.id(), &config.model_id, &configuration, session.turns());
    session.write_json("cost_summary.json", &summary)?;
    session.write_text("report.md", &render_report(session.id(), &configuration, &outcome, session.turns()))?;
    Ok(ReportArtifacts {
        report_md: session.dir().join("report.md"),
        cost_summary_json: session.dir().join("cost_summary.json"),
    })
}
