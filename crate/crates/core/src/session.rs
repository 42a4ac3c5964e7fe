//! Session lifecycle, per-turn audit records and the on-disk log layout:
//!
//! ```text
//! sessions/<UTC timestamp>/
//!     session.json
//!     recon.json
//!     turns/NNN.json
//!     ptt.json            (task tracking only)
//!     cost_summary.json   (after the report)
//!     report.md           (after the report)
//!     outcome.json
//! ```

use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SessionConfig;
use crate::gateway::TokenEstimate;
use crate::guardrails::{RootEvidence, SafetyVerdict};
use crate::money::Usd;
use crate::prompt::Block;
use crate::response::{LlmTurnResponse, ParseFailure};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always answers the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl FixedClock {
    pub fn at_unix(secs: i64) -> Self {
        FixedClock(Utc.timestamp_opt(secs, 0).single().expect("valid timestamp"))
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    AutoRoot,
    MaxTurns,
    UserAbort,
    FatalError,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::AutoRoot => "auto_root",
            TerminationReason::MaxTurns => "max_turns",
            TerminationReason::UserAbort => "user_abort",
            TerminationReason::FatalError => "fatal_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub root_achieved: bool,
    pub auto_root_detected: bool,
    pub turns_used: u32,
    pub total_cost: Usd,
    pub termination_reason: TerminationReason,
}

impl SessionOutcome {
    /// Derives the outcome from the persisted turns alone.
    ///
    /// Root evidence wins; otherwise a fatal or aborted last turn names the
    /// reason; a full budget means max_turns; anything shorter was an abort
    /// between turns.
    pub fn replay(records: &[TurnRecord], max_turns: u32) -> SessionOutcome {
        let total_cost = records.iter().map(|r| r.actual_cost).sum();
        let turns_used = records.len() as u32;
        let auto = records.iter().any(|r| r.root_verdict.is_root);
        let last = records.last();
        let termination_reason = if auto {
            TerminationReason::AutoRoot
        } else if last.is_some_and(|r| r.fatal_error.is_some()) {
            TerminationReason::FatalError
        } else if last.is_some_and(|r| r.aborted) {
            TerminationReason::UserAbort
        } else if turns_used >= max_turns {
            TerminationReason::MaxTurns
        } else {
            TerminationReason::UserAbort
        };
        SessionOutcome {
            root_achieved: auto,
            auto_root_detected: auto,
            turns_used,
            total_cost,
            termination_reason,
        }
    }
}

/// Full audit unit for one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: u32,
    pub prompt_text: String,
    pub prompt_token_estimate: u64,
    pub cost_estimate: Usd,
    pub prompt_approved: bool,
    pub raw_response: String,
    pub parsed: Option<LlmTurnResponse>,
    pub command_approved: bool,
    pub safety_verdict: SafetyVerdict,
    pub execution_output: String,
    pub root_verdict: RootEvidence,
    /// Milliseconds.
    pub wall_time: u64,

    pub blocks_present: Vec<Block>,
    pub estimate: TokenEstimate,
    pub actual_prompt_tokens: u64,
    pub actual_completion_tokens: u64,
    pub usage_reported: bool,
    pub actual_input_cost: Usd,
    pub actual_output_cost: Usd,
    pub actual_cost: Usd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_failure: Option<ParseFailure>,
    /// The command actually sent to the target, after any operator edit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_status: Option<i32>,
    pub timed_out: bool,
    pub voided: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rag_insight: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fatal_error: Option<String>,
    pub aborted: bool,
}

impl TurnRecord {
    /// A record with everything after the prompt left empty.
    pub fn new(turn_index: u32, prompt_text: String, estimate: TokenEstimate, cost_estimate: Usd) -> Self {
        TurnRecord {
            turn_index,
            prompt_text,
            prompt_token_estimate: estimate.prompt_tokens,
            cost_estimate,
            prompt_approved: false,
            raw_response: String::new(),
            parsed: None,
            command_approved: false,
            safety_verdict: SafetyVerdict::allowed(),
            execution_output: String::new(),
            root_verdict: RootEvidence::default(),
            wall_time: 0,
            blocks_present: Vec::new(),
            estimate,
            actual_prompt_tokens: 0,
            actual_completion_tokens: 0,
            usage_reported: false,
            actual_input_cost: Usd::ZERO,
            actual_output_cost: Usd::ZERO,
            actual_cost: Usd::ZERO,
            parse_failure: None,
            executed_command: None,
            exit_status: None,
            timed_out: false,
            voided: false,
            hint: None,
            rag_insight: None,
            notes: Vec::new(),
            fatal_error: None,
            aborted: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session i/o failure at {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("turn {got} recorded out of order (expected {expected})")]
    OutOfOrderTurn { expected: u32, got: u32 },
    #[error("turn {0} exceeds the turn budget")]
    TurnBudgetExceeded(u32),
    #[error("invalid turn record: {0}")]
    InvalidRecord(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SessionError {
    SessionError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

#[derive(Debug, Serialize)]
struct SessionFile<'a> {
    session_id: &'a str,
    started_at: DateTime<Utc>,
    config: &'a SessionConfig,
}

/// One open session: its directory, config and the turns recorded so far.
#[derive(Debug)]
pub struct SessionHandle {
    id: String,
    dir: PathBuf,
    config: SessionConfig,
    started_at: DateTime<Utc>,
    turns: Vec<TurnRecord>,
    total_cost: Usd,
}

pub const TIMESTAMP_FORMAT: &str = "%Y%m%dT%H%M%SZ";

/// Creates `<log_root>/sessions/<UTC timestamp>/`. A name clash within the
/// same second gets a numeric suffix.
pub fn open_session(log_root: &Path, config: SessionConfig, clock: &dyn Clock) -> Result<SessionHandle, SessionError> {
    config
        .validate()
        .map_err(|e| SessionError::InvalidConfig(e.to_string()))?;
    let started_at = clock.now();
    let sessions = log_root.join("sessions");
    std::fs::create_dir_all(&sessions).map_err(|e| io_err(&sessions, e))?;
    let stamp = started_at.format(TIMESTAMP_FORMAT).to_string();
    let mut n = 1;
    let (id, dir) = loop {
        let id = if n == 1 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = sessions.join(&id);
        match std::fs::create_dir(&dir) {
            Ok(()) => break (id, dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(io_err(&dir, e)),
        }
    };
    let turns_dir = dir.join("turns");
    std::fs::create_dir(&turns_dir).map_err(|e| io_err(&turns_dir, e))?;
    let handle = SessionHandle {
        id,
        dir,
        config,
        started_at,
        turns: Vec::new(),
        total_cost: Usd::ZERO,
    };
    handle.write_json(
        "session.json",
        &SessionFile {
            session_id: &handle.id,
            started_at,
            config: &handle.config,
        },
    )?;
    Ok(handle)
}

impl SessionHandle {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn started_at(&self) -> DateTime<Utc> {
        self.started_at
    }

    pub fn turns(&self) -> &[TurnRecord] {
        &self.turns
    }

    pub fn turns_used(&self) -> u32 {
        self.turns.len() as u32
    }

    pub fn total_cost(&self) -> Usd {
        self.total_cost
    }

    pub fn is_headless(&self) -> bool {
        self.config.is_headless()
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<(), SessionError> {
        let path = self.dir.join(name);
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| io_err(&path, e))?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), SessionError> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    /// Persists `record` as `turns/NNN.json` and adds its cost.
    pub fn record_turn(&mut self, record: TurnRecord) -> Result<&TurnRecord, SessionError> {
        let expected = self.turns_used() + 1;
        if record.turn_index != expected {
            return Err(SessionError::OutOfOrderTurn {
                expected,
                got: record.turn_index,
            });
        }
        if record.turn_index > self.config.max_turns {
            return Err(SessionError::TurnBudgetExceeded(record.turn_index));
        }
        if !record.prompt_approved && !record.raw_response.is_empty() {
            return Err(SessionError::InvalidRecord("raw_response present for an unapproved prompt"));
        }
        self.write_json(&format!("turns/{:03}.json", record.turn_index), &record)?;
        self.total_cost += record.actual_cost;
        self.turns.push(record);
        Ok(self.turns.last().expect("just pushed"))
    }

    pub fn outcome(&self) -> SessionOutcome {
        SessionOutcome::replay(&self.turns, self.config.max_turns)
    }
}

/// Reads `turns/*.json` of a session directory in turn order.
pub fn load_turns(session_dir: &Path) -> Result<Vec<TurnRecord>, SessionError> {
    let dir = session_dir.join("turns");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| io_err(p, e))
        })
        .collect()
}
