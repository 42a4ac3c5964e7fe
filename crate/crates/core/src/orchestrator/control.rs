//! Shared state between the turn loop and an operator front end.
//!
//! The loop talks to the hub through [`HubGate`], [`HubInbox`] and
//! [`HubSink`]; a front end calls the `ControlHub` methods directly.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{admit_hint, EventSink, HintRejected, LoopEvent, OperatorInbox, TurnSummary};
use crate::approval::{ApprovalDecision, ApprovalGate, ApprovalItem, ApprovalKind, ApprovalRequest, GateAnswer, GateError};
use crate::config::FeatureFlags;
use crate::money::Usd;
use crate::ptt::PttTree;
use crate::session::{Clock, SessionOutcome, SystemClock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEnvelope {
    pub seq: u64,
    #[serde(flatten)]
    pub event: LoopEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: Option<String>,
    pub configuration: String,
    pub max_turns: u32,
    pub turns_completed: u32,
    pub total_cost: Usd,
    pub turns: Vec<TurnSummary>,
    pub tree: Option<PttTree>,
    pub pending_approvals: Vec<ApprovalItem>,
    pub hint_pending: bool,
    pub abort_requested: bool,
    pub outcome: Option<SessionOutcome>,
    /// Events with a larger sequence number are not reflected here.
    pub last_event_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("no approval item {0}")]
    UnknownItem(String),
    #[error("approval item {0} was already decided")]
    AlreadyDecided(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HintAck {
    pub replaced: bool,
}

struct HubState {
    flags: FeatureFlags,
    snapshot: SessionSnapshot,
    items: BTreeMap<String, ApprovalItem>,
    events: Vec<EventEnvelope>,
    hint: Option<String>,
    prompts_built: u32,
    closed: bool,
}

impl HubState {
    fn push(&mut self, event: LoopEvent) {
        match &event {
            LoopEvent::SessionStarted {
                session_id,
                configuration,
                max_turns,
            } => {
                self.snapshot.session_id = Some(session_id.clone());
                self.snapshot.configuration = configuration.clone();
                self.snapshot.max_turns = *max_turns;
            }
            LoopEvent::TurnRecorded { summary } => {
                self.snapshot.turns_completed = summary.turn_index;
                self.snapshot.total_cost = summary.cumulative_cost;
                self.snapshot.turns.push(summary.clone());
            }
            LoopEvent::PromptBuilt { turn_index, .. } => self.prompts_built = *turn_index,
            LoopEvent::TreeUpdated { tree } => self.snapshot.tree = Some(tree.clone()),
            LoopEvent::SessionFinished { outcome } => self.snapshot.outcome = Some(outcome.clone()),
            _ => {}
        }
        let seq = self.events.len() as u64 + 1;
        self.snapshot.last_event_seq = seq;
        self.events.push(EventEnvelope { seq, event });
    }
}

pub struct ControlHub {
    state: Mutex<HubState>,
    changed: Condvar,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for ControlHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlHub").finish_non_exhaustive()
    }
}

impl ControlHub {
    pub fn new(flags: FeatureFlags, max_turns: u32) -> Arc<Self> {
        Self::with_clock(flags, max_turns, Arc::new(SystemClock))
    }

    pub fn with_clock(flags: FeatureFlags, max_turns: u32, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(ControlHub {
            state: Mutex::new(HubState {
                flags,
                snapshot: SessionSnapshot {
                    session_id: None,
                    configuration: flags.label(),
                    max_turns,
                    turns_completed: 0,
                    total_cost: Usd::ZERO,
                    turns: Vec::new(),
                    tree: None,
                    pending_approvals: Vec::new(),
                    hint_pending: false,
                    abort_requested: false,
                    outcome: None,
                    last_event_seq: 0,
                },
                items: BTreeMap::new(),
                events: Vec::new(),
                hint: None,
                prompts_built: 0,
                closed: false,
            }),
            changed: Condvar::new(),
            clock,
        })
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn gate(self: &Arc<Self>) -> HubGate {
        HubGate(Arc::clone(self))
    }

    pub fn inbox(self: &Arc<Self>) -> HubInbox {
        HubInbox(Arc::clone(self))
    }

    pub fn sink(self: &Arc<Self>) -> HubSink {
        HubSink(Arc::clone(self))
    }

    pub fn flags(&self) -> FeatureFlags {
        self.lock().flags
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let st = self.lock();
        let mut snap = st.snapshot.clone();
        snap.pending_approvals = st.items.values().filter(|i| i.decision.is_none()).cloned().collect();
        snap.hint_pending = st.hint.is_some();
        snap
    }

    pub fn pending(&self) -> Vec<ApprovalItem> {
        self.lock().items.values().filter(|i| i.decision.is_none()).cloned().collect()
    }

    pub fn item(&self, item_id: &str) -> Option<ApprovalItem> {
        self.lock().items.get(item_id).cloned()
    }

    /// Decides a pending item. Edits only apply to command items.
    pub fn resolve_approval(
        &self,
        item_id: &str,
        decision: ApprovalDecision,
        edited_payload: Option<String>,
    ) -> Result<ApprovalItem, ResolveError> {
        let mut st = self.lock();
        let item = st.items.get_mut(item_id).ok_or_else(|| ResolveError::UnknownItem(item_id.to_string()))?;
        if item.decision.is_some() {
            return Err(ResolveError::AlreadyDecided(item_id.to_string()));
        }
        item.decision = Some(decision);
        if item.kind == ApprovalKind::Command && decision == ApprovalDecision::Approved {
            item.edited_payload = edited_payload.filter(|e| !e.trim().is_empty());
        }
        let item = item.clone();
        st.push(LoopEvent::ApprovalResolved {
            item_id: item.item_id.clone(),
            decision,
            edited: item.edited_payload.is_some(),
        });
        drop(st);
        self.changed.notify_all();
        Ok(item)
    }

    /// Queues operator guidance for the next prompt; a newer hint replaces an
    /// unused older one. Accepted once the turn-1 prompt exists, since the
    /// next build is then turn 2 or later.
    pub fn submit_hint(&self, text: &str) -> Result<HintAck, HintRejected> {
        let mut st = self.lock();
        let started = st.snapshot.turns_completed.max(st.prompts_built);
        admit_hint(&st.flags, started, text)?;
        let replaced = st.hint.replace(text.trim().to_string()).is_some();
        if replaced {
            log::info!("queued hint replaced by a newer one");
        }
        st.push(LoopEvent::HintQueued { replaced });
        drop(st);
        self.changed.notify_all();
        Ok(HintAck { replaced })
    }

    /// Stops the session at the next gate or between turns.
    pub fn abort(&self) {
        let mut st = self.lock();
        st.snapshot.abort_requested = true;
        drop(st);
        self.changed.notify_all();
    }

    /// No more decisions will arrive; open gates answer `Closed`.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn events_since(&self, seq: u64) -> Vec<EventEnvelope> {
        self.lock().events.iter().filter(|e| e.seq > seq).cloned().collect()
    }

    /// Blocks up to `timeout` for events after `seq`.
    pub fn wait_for_events(&self, seq: u64, timeout: Duration) -> Vec<EventEnvelope> {
        let st = self.lock();
        let (st, _) = self
            .changed
            .wait_timeout_while(st, timeout, |s| s.snapshot.last_event_seq <= seq && !s.closed)
            .unwrap_or_else(|p| p.into_inner());
        st.events.iter().filter(|e| e.seq > seq).cloned().collect()
    }

    pub fn is_finished(&self) -> bool {
        self.lock().snapshot.outcome.is_some()
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }
}

/// Approval gate that waits for [`ControlHub::resolve_approval`].
#[derive(Debug, Clone)]
pub struct HubGate(Arc<ControlHub>);

impl ApprovalGate for HubGate {
    fn decide(&mut self, request: &ApprovalRequest) -> Result<GateAnswer, GateError> {
        let hub = &self.0;
        let mut st = hub.lock();
        if st.snapshot.abort_requested {
            return Err(GateError::Aborted);
        }
        let item = ApprovalItem::from_request(request, hub.clock.now());
        st.items.insert(item.item_id.clone(), item.clone());
        st.push(LoopEvent::ApprovalRequested { item });
        hub.changed.notify_all();
        loop {
            let decided = st.items.get(&request.item_id).and_then(|i| i.decision.map(|d| (d, i.edited_payload.clone())));
            if let Some((decision, edited_payload)) = decided {
                return Ok(GateAnswer {
                    decision,
                    edited_payload,
                });
            }
            if st.snapshot.abort_requested {
                return Err(GateError::Aborted);
            }
            if st.closed {
                return Err(GateError::Closed);
            }
            st = hub.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }
}

#[derive(Debug, Clone)]
pub struct HubInbox(Arc<ControlHub>);

impl OperatorInbox for HubInbox {
    fn take_hints(&mut self, _turns_completed: u32) -> Vec<String> {
        self.0.lock().hint.take().into_iter().collect()
    }

    fn abort_requested(&self) -> bool {
        self.0.lock().snapshot.abort_requested
    }
}

#[derive(Debug, Clone)]
pub struct HubSink(Arc<ControlHub>);

impl EventSink for HubSink {
    fn emit(&self, event: LoopEvent) {
        self.0.lock().push(event);
        self.0.changed.notify_all();
    }
}
