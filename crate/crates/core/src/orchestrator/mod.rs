//! The turn loop: recon, prompt, cost gate, completion, parse, safety gate,
//! command gate, execution, root check, then task-tree and retrieval updates.

mod control;
mod report;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approval::{ApprovalDecision, ApprovalGate, ApprovalRequest, GateError};
use crate::config::{ApprovalMode, FeatureFlags, SessionConfig};
use crate::executor::{run_recon_suite, CommandExecutor, ExecError, ExecutionResult};
use crate::gateway::{self, complete, estimate, render_quote_table, CostModel, GatewayError, ModelTransport, RateTable};
use crate::guardrails::{Blacklist, RootDetector};
use crate::money::Usd;
use crate::prompt::{
    build_prompt, push_history, render_rag_insight, summarize_context, Block, HistoryEntry, PromptBundle, PromptError,
    PromptInputs, PromptTemplates, SystemContext,
};
use crate::ptt::{apply_update, summarize_tree, CommandsToAvoid, PttTree};
use crate::rag::{
    choose_query, online_retrieve, BinaryLexicon, Embedder, FlatIndex, HashedBagOfWords, PageFetcher, RagError,
    RetrievedSnippet,
};
use crate::response::{parse_response_with, remediation_prompt, ParseFailure, ParseFailureKind, ParseOptions};
use crate::session::{Clock, SessionError, SessionHandle, SessionOutcome, TurnRecord};

pub use control::{
    ControlHub, EventEnvelope, HintAck, HubGate, HubInbox, HubSink, ResolveError, SessionSnapshot,
};
pub use report::{cost_summary, emit_report, render_report, CostSummary, ReportArtifacts, TurnCost};

/// Verbatim suggestions at which a command is put on the avoid list.
pub const REPEAT_LIMIT: u32 = 3;
pub const PTT_SUMMARY_CHARS: usize = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
#[serde(rename_all = "snake_case")]
pub enum HintRejected {
    #[error("hints are accepted from turn 2 onwards")]
    TooEarly,
    #[error("hint injection is not enabled for this run")]
    FeatureDisabled,
    #[error("hint text is empty")]
    Empty,
}

/// Shared admission rule for hints; `turns_completed` is the number of turns
/// already recorded.
pub fn admit_hint(flags: &FeatureFlags, turns_completed: u32, text: &str) -> Result<(), HintRejected> {
    if !flags.hint {
        return Err(HintRejected::FeatureDisabled);
    }
    if turns_completed == 0 {
        return Err(HintRejected::TooEarly);
    }
    if text.trim().is_empty() {
        return Err(HintRejected::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub turns_completed: u32,
    pub context: SystemContext,
    pub history: Vec<HistoryEntry>,
    pub tree: Option<PttTree>,
    pub avoid: CommandsToAvoid,
    pub pending_hint: Option<String>,
    pub last_insight: Option<RetrievedSnippet>,
    pub outcome: Option<SessionOutcome>,
    /// Corrections and warnings for the next prompt.
    pub notices: Vec<String>,
    pub suggestion_counts: BTreeMap<String, u32>,
    pub last_command: Option<String>,
}

impl LoopState {
    pub fn new(context: SystemContext, flags: &FeatureFlags) -> Self {
        LoopState {
            turns_completed: 0,
            context,
            history: Vec::new(),
            tree: flags.ptt.then(PttTree::new),
            avoid: CommandsToAvoid::new(),
            pending_hint: None,
            last_insight: None,
            outcome: None,
            notices: Vec::new(),
            suggestion_counts: BTreeMap::new(),
            last_command: None,
        }
    }

    /// The turn the next prompt is for.
    pub fn turn_index(&self) -> u32 {
        self.turns_completed + 1
    }

    /// Queues a hint for the next prompt. Returns the hint it replaced.
    pub fn submit_hint(&mut self, text: &str, flags: &FeatureFlags) -> Result<Option<String>, HintRejected> {
        admit_hint(flags, self.turns_completed, text)?;
        let replaced = self.pending_hint.replace(text.trim().to_string());
        if let Some(old) = &replaced {
            log::info!("hint replaced before use: {old:?}");
        }
        Ok(replaced)
    }

    /// Renders this state's prompt under `config`. Optional material is
    /// offered only when its flag is on.
    pub fn build_prompt(&self, config: &SessionConfig, templates: &PromptTemplates) -> Result<PromptBundle, PromptError> {
        let flags = &config.flags;
        let turn = self.turn_index();
        let insight = if flags.rag { self.last_insight.as_ref().map(render_rag_insight) } else { None };
        let (summary, current, avoid) = match (&self.tree, flags.ptt) {
            (Some(tree), true) => (
                (!tree.is_empty()).then(|| summarize_tree(tree, PTT_SUMMARY_CHARS)),
                tree.current_task_id.clone(),
                self.avoid.render(),
            ),
            (None, true) => (None, None, self.avoid.render()),
            _ => (None, None, None),
        };
        let mut inputs = PromptInputs::new(turn, &self.context, &self.history);
        inputs.hint = self.pending_hint.as_deref().filter(|_| flags.hint && turn >= 2);
        inputs.rag_insight = insight.as_deref();
        inputs.ptt_summary = summary.as_deref();
        inputs.current_task_id = current.as_deref();
        inputs.avoid_list = avoid.as_deref();
        inputs.notices = &self.notices;
        build_prompt(config, templates, &inputs)
    }
}

/// Operator input that is not tied to a gate.
pub trait OperatorInbox: Send {
    /// Hints submitted since the last call.
    fn take_hints(&mut self, _turns_completed: u32) -> Vec<String> {
        Vec::new()
    }

    fn abort_requested(&self) -> bool {
        false
    }
}

#[derive(Debug, Default)]
pub struct NoInbox;

impl OperatorInbox for NoInbox {}

/// Hints handed over once the given number of turns has completed.
#[derive(Debug, Clone, Default)]
pub struct ScriptedHints {
    by_turn: BTreeMap<u32, Vec<String>>,
}

impl ScriptedHints {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn after_turn(mut self, turns_completed: u32, text: &str) -> Self {
        self.by_turn.entry(turns_completed).or_default().push(text.to_string());
        self
    }
}

impl OperatorInbox for ScriptedHints {
    fn take_hints(&mut self, turns_completed: u32) -> Vec<String> {
        self.by_turn.remove(&turns_completed).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSummary {
    pub turn_index: u32,
    pub prompt_approved: bool,
    pub command: Option<String>,
    pub command_approved: bool,
    pub voided: bool,
    pub timed_out: bool,
    pub root: bool,
    pub parse_failure: Option<ParseFailureKind>,
    pub actual_cost: Usd,
    pub cumulative_cost: Usd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LoopEvent {
    SessionStarted {
        session_id: String,
        configuration: String,
        max_turns: u32,
    },
    ReconCompleted {
        probes: usize,
        summary: String,
    },
    PromptBuilt {
        turn_index: u32,
        word_count: u64,
        prompt_tokens: u64,
        cost_estimate: Usd,
    },
    ApprovalRequested {
        item: crate::approval::ApprovalItem,
    },
    ApprovalResolved {
        item_id: String,
        decision: ApprovalDecision,
        edited: bool,
    },
    TurnRecorded {
        summary: TurnSummary,
    },
    TreeUpdated {
        tree: PttTree,
    },
    HintQueued {
        replaced: bool,
    },
    Notice {
        turn_index: u32,
        message: String,
    },
    SessionFinished {
        outcome: SessionOutcome,
    },
}

pub trait EventSink: Send + Sync {
    fn emit(&self, event: LoopEvent);
}

#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _: LoopEvent) {}
}

/// Keeps every event, for tests.
#[derive(Debug, Default)]
pub struct RecordingSink(pub std::sync::Mutex<Vec<LoopEvent>>);

impl EventSink for RecordingSink {
    fn emit(&self, event: LoopEvent) {
        self.0.lock().expect("sink lock").push(event);
    }
}

pub struct OnlineRetriever {
    pub fetcher: Box<dyn PageFetcher>,
    pub lexicon: BinaryLexicon,
}

pub struct Retriever {
    pub index: FlatIndex<f32>,
    pub embedder: Box<dyn Embedder<f32>>,
    pub online: Option<OnlineRetriever>,
}

impl Retriever {
    pub fn offline(index: FlatIndex<f32>) -> Self {
        Retriever {
            index,
            embedder: Box::new(HashedBagOfWords::default()),
            online: None,
        }
    }

    /// Online first when configured, falling back to the offline index.
    pub fn retrieve(&self, query: &str, prefer_online: bool) -> (Option<RetrievedSnippet>, Option<String>) {
        let mut fallback = None;
        if prefer_online {
            match &self.online {
                Some(o) => match online_retrieve(query, o.fetcher.as_ref(), &o.lexicon) {
                    Ok(s) => return (Some(s), None),
                    Err(e) => fallback = Some(format!("online retrieval failed ({e}); fell back to the offline index")),
                },
                None => fallback = Some("no online retriever configured; used the offline index".to_string()),
            }
        }
        let hit = self.index.search(self.embedder.as_ref(), query, 1).into_iter().next();
        (hit, fallback)
    }
}

/// Immutable resources the loop reads.
pub struct Toolkit {
    pub templates: PromptTemplates,
    pub blacklist: Blacklist,
    pub detector: RootDetector,
    pub cost_model: CostModel,
    pub retriever: Option<Retriever>,
    pub parse_options: ParseOptions,
}

#[derive(Debug, Error)]
pub enum SetupError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rag(#[from] RagError),
    #[error("blacklist: {0}")]
    Blacklist(String),
    #[error("retrieval is enabled but no RAG_CORPUS is configured")]
    NoCorpus,
}

impl Toolkit {
    /// Everything from built-in defaults, with no retriever.
    pub fn builtin(model_id: &str) -> Result<Self, SetupError> {
        Ok(Toolkit {
            templates: PromptTemplates::builtin(),
            blacklist: Blacklist::builtin(),
            detector: RootDetector::default(),
            cost_model: RateTable::builtin().lookup(model_id)?,
            retriever: None,
            parse_options: ParseOptions::default(),
        })
    }

    /// Loads overrides named in `config`; the retrieval index is built from
    /// `rag_corpus` (or loaded from its `index/` subdirectory when present).
    pub fn from_config(config: &SessionConfig) -> Result<Self, SetupError> {
        let templates = match &config.prompts_dir {
            Some(dir) => PromptTemplates::from_dir(dir)?,
            None => PromptTemplates::builtin(),
        };
        let blacklist = match config.prompts_dir.as_ref().map(|d| d.join("blacklist.rules")) {
            Some(p) if p.exists() => Blacklist::from_file(&p).map_err(|e| SetupError::Blacklist(e.to_string()))?,
            _ => Blacklist::builtin(),
        };
        let rates = match &config.rates_file {
            Some(p) => RateTable::from_file(p)?,
            None => RateTable::builtin(),
        };
        let retriever = if config.flags.rag {
            let corpus = config.rag_corpus.as_ref().ok_or(SetupError::NoCorpus)?;
            Some(Retriever::offline(load_or_ingest(corpus)?))
        } else {
            None
        };
        Ok(Toolkit {
            templates,
            blacklist,
            detector: RootDetector {
                hash_prompt_counts: config.hash_prompt_counts,
            },
            cost_model: rates.lookup(&config.model_id)?,
            retriever,
            parse_options: ParseOptions::default(),
        })
    }
}

/// A saved index under `<corpus>/index/` if one exists, else a fresh ingest.
pub fn load_or_ingest(corpus: &std::path::Path) -> Result<FlatIndex<f32>, RagError> {
    let saved = corpus.join("index");
    if saved.join("index.bin").exists() {
        return FlatIndex::load(&saved);
    }
    crate::rag::ingest(corpus, crate::rag::MAX_CHUNK_CHARS)
}

/// Mutable collaborators for one run.
pub struct LoopIo<'a> {
    pub transport: &'a mut dyn ModelTransport,
    pub executor: &'a mut dyn CommandExecutor,
    pub gate: &'a mut dyn ApprovalGate,
    pub inbox: &'a mut dyn OperatorInbox,
    pub events: &'a dyn EventSink,
    pub clock: &'a dyn Clock,
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("executor lost before the first turn: {0}")]
    ExecutorLost(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug)]
pub struct LoopResult {
    pub outcome: SessionOutcome,
    pub state: LoopState,
    pub session_dir: PathBuf,
}

enum Step {
    Continue,
    Stop,
}

struct Turn<'s, 'io, 't> {
    session: &'s mut SessionHandle,
    io: &'s mut LoopIo<'io>,
    kit: &'t Toolkit,
    state: &'s mut LoopState,
}

impl Turn<'_, '_, '_> {
    fn note(&mut self, rec: &mut TurnRecord, message: String) {
        log::info!("turn {}: {message}", rec.turn_index);
        self.io.events.emit(LoopEvent::Notice {
            turn_index: rec.turn_index,
            message: message.clone(),
        });
        rec.notes.push(message);
    }

    fn finish(&mut self, mut rec: TurnRecord, started: chrono::DateTime<chrono::Utc>) -> Result<(), OrchestratorError> {
        let elapsed = (self.io.clock.now() - started).num_milliseconds();
        rec.wall_time = elapsed.max(0) as u64;
        let summary = TurnSummary {
            turn_index: rec.turn_index,
            prompt_approved: rec.prompt_approved,
            command: rec.executed_command.clone(),
            command_approved: rec.command_approved,
            voided: rec.voided,
            timed_out: rec.timed_out,
            root: rec.root_verdict.is_root,
            parse_failure: rec.parse_failure.as_ref().map(|f| f.kind),
            actual_cost: rec.actual_cost,
            cumulative_cost: self.session.total_cost() + rec.actual_cost,
        };
        self.session.record_turn(rec)?;
        self.state.turns_completed += 1;
        self.io.events.emit(LoopEvent::TurnRecorded { summary });
        let flags = self.session.config().flags;
        for hint in self.io.inbox.take_hints(self.state.turns_completed) {
            match self.state.submit_hint(&hint, &flags) {
                Ok(replaced) => self.io.events.emit(LoopEvent::HintQueued {
                    replaced: replaced.is_some(),
                }),
                Err(e) => log::warn!("hint dropped: {e}"),
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<Step, OrchestratorError> {
        let config = self.session.config().clone();
        let flags = config.flags;
        let turn = self.state.turn_index();
        let started = self.io.clock.now();

        let bundle = self.state.build_prompt(&config, &self.kit.templates)?;
        let (est, quote) = estimate(&bundle.text, &self.kit.cost_model);
        let mut rec = TurnRecord::new(turn, bundle.text.clone(), est, quote.total);
        rec.blocks_present = bundle.blocks_present.iter().copied().collect();
        let hint_used = bundle.blocks_present.contains(&Block::Hint);
        if hint_used {
            rec.hint = self.state.pending_hint.clone();
        }
        rec.rag_insight = bundle.block(Block::RagInsight).map(str::to_string);
        self.io.events.emit(LoopEvent::PromptBuilt {
            turn_index: turn,
            word_count: bundle.word_count,
            prompt_tokens: est.prompt_tokens,
            cost_estimate: quote.total,
        });

        let mut req = ApprovalRequest::prompt(&format!("t{turn}-prompt"), &bundle.text, Some(est), Some(quote), &config.model_id);
        req.preview = Some(render_quote_table(&config.model_id, &est, &quote));
        match gateway::request_approval(&req, config.approval_mode, self.io.gate) {
            Ok(ApprovalDecision::Approved) => rec.prompt_approved = true,
            Ok(ApprovalDecision::Denied) => {
                self.note(&mut rec, "prompt denied at the cost gate; turn consumed".into());
                self.finish(rec, started)?;
                return Ok(Step::Continue);
            }
            Err(_) => {
                rec.aborted = true;
                self.note(&mut rec, "session aborted at the cost gate".into());
                self.finish(rec, started)?;
                return Ok(Step::Stop);
            }
        }
        if hint_used {
            self.state.pending_hint = None;
        }
        self.state.notices.clear();

        let completion = match complete(&bundle.text, self.io.transport, &self.kit.cost_model, &est) {
            Err(GatewayError::Transport(first)) => {
                self.note(&mut rec, format!("transport failure ({first}); retrying once"));
                complete(&bundle.text, self.io.transport, &self.kit.cost_model, &est)
            }
            other => other,
        };
        let completion = match completion {
            Ok(c) => c,
            Err(GatewayError::EmptyResponse) => {
                rec.actual_prompt_tokens = est.prompt_tokens;
                rec.actual_completion_tokens = 0;
                rec.actual_input_cost = self.kit.cost_model.input_cost(est.prompt_tokens);
                rec.actual_cost = rec.actual_input_cost;
                let failure = ParseFailure {
                    kind: ParseFailureKind::NotJson,
                    field: None,
                    detail: "the model returned an empty response".into(),
                };
                self.state.notices.push(remediation_prompt(&failure));
                rec.parse_failure = Some(failure);
                self.note(&mut rec, "empty model response; input cost charged from the estimate".into());
                self.finish(rec, started)?;
                return Ok(Step::Continue);
            }
            Err(e) => {
                rec.fatal_error = Some(format!("model transport failed after one retry: {e}"));
                self.finish(rec, started)?;
                return Ok(Step::Stop);
            }
        };
        rec.raw_response = completion.raw_text.clone();
        rec.actual_prompt_tokens = completion.usage.prompt_tokens;
        rec.actual_completion_tokens = completion.usage.completion_tokens;
        rec.usage_reported = completion.usage_reported;
        rec.actual_input_cost = completion.input_cost;
        rec.actual_output_cost = completion.output_cost;
        rec.actual_cost = completion.actual_cost;

        let parsed = match parse_response_with(&completion.raw_text, &flags, self.kit.parse_options) {
            Ok(p) => p,
            Err(failure) => {
                self.state.notices.push(remediation_prompt(&failure));
                self.note(&mut rec, format!("reply rejected: {failure}"));
                rec.parse_failure = Some(failure);
                self.finish(rec, started)?;
                return Ok(Step::Continue);
            }
        };
        for w in &parsed.warnings {
            self.state.notices.push(format!("Warning: your previous reply exceeded a soft limit ({w})."));
            self.note(&mut rec, format!("soft limit exceeded: {w}"));
        }
        let response = parsed.response;
        rec.parsed = Some(response.clone());
        let mut command = response.command_non_interactive.trim().to_string();

        let seen = self.state.suggestion_counts.entry(command.clone()).or_insert(0);
        *seen += 1;
        if *seen >= REPEAT_LIMIT {
            let count = *seen;
            self.state.avoid.note(&command);
            self.state.notices.push(format!(
                "Warning: the command \"{command}\" has been suggested {count} times and is now on the avoid list. Choose a different approach."
            ));
            self.note(&mut rec, format!("command suggested {count} times; added to the avoid list"));
        }

        if flags.ptt {
            if let Some(update) = &response.ptt_update {
                let tree = self.state.tree.get_or_insert_with(PttTree::new);
                match apply_update(tree, update, turn) {
                    Ok(next) => {
                        *tree = next;
                        for c in &update.commands_to_avoid {
                            self.state.avoid.note(c);
                        }
                        let tree = tree.clone();
                        self.session.write_json("ptt.json", &tree)?;
                        self.io.events.emit(LoopEvent::TreeUpdated { tree });
                    }
                    Err(e) => {
                        self.state
                            .notices
                            .push(format!("Warning: your ptt_update was rejected ({e}); the task tree is unchanged."));
                        self.note(&mut rec, format!("ptt_update rejected: {e}"));
                    }
                }
            }
        }

        let verdict = self.kit.blacklist.screen(&command);
        rec.safety_verdict = verdict.clone();
        if !verdict.allowed {
            return self.void(rec, started, &command, verdict.matched_rule.unwrap_or_default());
        }

        if config.approval_mode == ApprovalMode::Interactive {
            let req = ApprovalRequest::command(
                &format!("t{turn}-command"),
                &command,
                &response.rationale,
                &response.command_interactive,
                &config.model_id,
            );
            match self.io.gate.decide(&req) {
                Ok(answer) if answer.decision == ApprovalDecision::Approved => {
                    if let Some(edited) = answer.edited_payload.map(|e| e.trim().to_string()).filter(|e| *e != command) {
                        let v = self.kit.blacklist.screen(&edited);
                        rec.safety_verdict = v.clone();
                        self.note(&mut rec, format!("operator edited the command to {edited:?}"));
                        if !v.allowed {
                            return self.void(rec, started, &edited, v.matched_rule.unwrap_or_default());
                        }
                        command = edited;
                    }
                }
                Ok(_) | Err(GateError::Closed) => {
                    self.state.notices.push(format!(
                        "Note: the operator declined the command \"{command}\". Suggest an alternative."
                    ));
                    self.note(&mut rec, "command denied by the operator; turn consumed".into());
                    self.finish(rec, started)?;
                    return Ok(Step::Continue);
                }
                Err(GateError::Aborted) => {
                    rec.aborted = true;
                    self.note(&mut rec, "session aborted at the command gate".into());
                    self.finish(rec, started)?;
                    return Ok(Step::Stop);
                }
            }
        }
        rec.command_approved = true;
        rec.executed_command = Some(command.clone());

        let result = match self.io.executor.run_command(&command, config.command_timeout()) {
            Ok(r) => r,
            Err(ExecError::ChannelBroken(why)) => {
                rec.fatal_error = Some(format!("executor lost: {why}"));
                self.finish(rec, started)?;
                return Ok(Step::Stop);
            }
            Err(other) => ExecutionResult {
                stderr: other.to_string(),
                ..Default::default()
            },
        };
        rec.execution_output = result.combined_output();
        rec.exit_status = result.exit_status;
        rec.timed_out = result.timed_out;
        rec.root_verdict = self.kit.detector.detect(&rec.execution_output);
        if rec.root_verdict.is_root {
            self.note(&mut rec, "root evidence found; stopping".into());
            self.finish(rec, started)?;
            return Ok(Step::Stop);
        }
        if result.timed_out {
            self.note(&mut rec, "command timed out; no output captured (interactive programs cannot be monitored)".into());
        }
        if !result.succeeded() {
            self.state.avoid.note(&command);
        }
        let history = std::mem::take(&mut self.state.history);
        self.state.history = push_history(history, HistoryEntry::from_result(turn, &command, &result), config.history_cap);

        if let (true, Some(retriever)) = (flags.rag, &self.kit.retriever) {
            match choose_query(config.rag_query_mode, response.rag_search_query.as_deref(), self.state.last_command.as_deref()) {
                Ok(query) => {
                    let (hit, fallback) = retriever.retrieve(&query, flags.rag_online);
                    if let Some(msg) = fallback {
                        self.note(&mut rec, msg);
                    }
                    if hit.is_some() {
                        self.state.last_insight = hit;
                    }
                }
                Err(e) => self.note(&mut rec, format!("no retrieval this turn: {e}")),
            }
        }
        self.state.last_command = Some(command);
        self.finish(rec, started)?;
        Ok(Step::Continue)
    }

    fn void(
        &mut self,
        mut rec: TurnRecord,
        started: chrono::DateTime<chrono::Utc>,
        command: &str,
        rule: String,
    ) -> Result<Step, OrchestratorError> {
        rec.voided = true;
        self.state.avoid.note(command);
        self.state.notices.push(format!(
            "Warning: the command \"{command}\" was blocked by the safety blacklist (rule: {rule}) and was not run."
        ));
        self.note(&mut rec, format!("command voided by rule {rule}"));
        self.finish(rec, started)?;
        Ok(Step::Continue)
    }
}

/// Runs recon and then turns until root evidence, the turn budget, an abort
/// or a fatal error. The outcome is the replay of the recorded turns.
pub fn run_session(session: &mut SessionHandle, kit: &Toolkit, io: &mut LoopIo<'_>) -> Result<LoopResult, OrchestratorError> {
    let config = session.config().clone();
    io.events.emit(LoopEvent::SessionStarted {
        session_id: session.id().to_string(),
        configuration: config.flags.label(),
        max_turns: config.max_turns,
    });
    let recon = run_recon_suite(io.executor, config.command_timeout()).map_err(|e| OrchestratorError::ExecutorLost(e.to_string()))?;
    session.write_json("recon.json", &recon)?;
    let context = summarize_context(&recon);
    io.events.emit(LoopEvent::ReconCompleted {
        probes: recon.len(),
        summary: context.render(),
    });
    let mut state = LoopState::new(context, &config.flags);

    while state.turns_completed < config.max_turns {
        if io.inbox.abort_requested() {
            log::info!("abort requested between turns");
            break;
        }
        let step = Turn {
            session: &mut *session,
            io: &mut *io,
            kit,
            state: &mut state,
        }
        .run()?;
        if let Step::Stop = step {
            break;
        }
    }

    let outcome = session.outcome();
    session.write_json("outcome.json", &outcome)?;
    state.outcome = Some(outcome.clone());
    io.events.emit(LoopEvent::SessionFinished {
        outcome: outcome.clone(),
    });
    Ok(LoopResult {
        outcome,
        state,
        session_dir: session.dir().to_path_buf(),
    })
}
