//! HTTP control API over a [`ControlHub`]: snapshots, approvals, hints, abort
//! and a server-sent event stream.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use privesc_core::approval::ApprovalDecision;
use privesc_core::orchestrator::{ControlHub, EventEnvelope, HintRejected, ResolveError};
use rand::distributions::{Alphanumeric, DistString};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::oneshot;

pub const TOKEN_ENV: &str = "CONTROL_TOKEN";
pub const DEFAULT_CONTROL_ADDR: &str = "127.0.0.1:8787";

/// How long one blocking wait for events lasts before the stream re-checks.
const EVENT_POLL: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("refusing to bind the control API to non-loopback address {0} without explicit permission")]
    NonLoopback(SocketAddr),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: SocketAddr, reason: String },
    #[error("cannot start the control runtime: {0}")]
    Runtime(String),
    #[error("control token is empty")]
    EmptyToken,
}

/// The token given in `CONTROL_TOKEN`, or a fresh random one. The flag tells
/// whether it was generated.
pub fn control_token_from_env() -> (String, bool) {
    match std::env::var(TOKEN_ENV) {
        Ok(t) if !t.trim().is_empty() => (t.trim().to_string(), false),
        _ => (generate_token(), true),
    }
}

pub fn generate_token() -> String {
    Alphanumeric.sample_string(&mut rand::thread_rng(), 32)
}

#[derive(Clone)]
struct ApiState {
    hub: Arc<ControlHub>,
    token: Arc<str>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    pub message: String,
}

fn api_error(status: StatusCode, error: &str, kind: Option<&str>, message: String) -> Response {
    let body = ApiError {
        error: error.to_string(),
        kind: kind.map(str::to_string),
        message,
    };
    (status, Json(body)).into_response()
}

fn tokens_match(given: &[u8], want: &[u8]) -> bool {
    given.len() == want.len() && given.iter().zip(want).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
}

async fn require_token(State(state): State<ApiState>, req: Request, next: Next) -> Response {
    let given = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    if !tokens_match(given.as_bytes(), state.token.as_bytes()) {
        return api_error(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            None,
            "missing or wrong bearer token".into(),
        );
    }
    next.run(req).await
}

/// Routes under `/api`, all behind the bearer token.
pub fn router(hub: Arc<ControlHub>, token: &str) -> Router {
    let state = ApiState {
        hub,
        token: Arc::from(token),
    };
    Router::new()
        .route("/api/session", get(session))
        .route("/api/approvals/pending", get(pending))
        .route("/api/approvals/{id}", post(resolve))
        .route("/api/hint", post(hint))
        .route("/api/abort", post(abort))
        .route("/api/events", get(events))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn session(State(st): State<ApiState>) -> Response {
    Json(st.hub.snapshot()).into_response()
}

async fn pending(State(st): State<ApiState>) -> Response {
    Json(st.hub.pending()).into_response()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolveBody {
    pub decision: ApprovalDecision,
    #[serde(default)]
    pub edited_payload: Option<String>,
}

fn bad_body(r: JsonRejection) -> Response {
    api_error(r.status(), "bad_request", None, r.body_text())
}

async fn resolve(
    State(st): State<ApiState>,
    Path(id): Path<String>,
    body: Result<Json<ResolveBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(r) => return bad_body(r),
    };
    match st.hub.resolve_approval(&id, body.decision, body.edited_payload) {
        Ok(item) => Json(item).into_response(),
        Err(e @ ResolveError::UnknownItem(_)) => api_error(StatusCode::NOT_FOUND, "unknown_item", None, e.to_string()),
        Err(e @ ResolveError::AlreadyDecided(_)) => {
            api_error(StatusCode::CONFLICT, "already_decided", None, e.to_string())
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HintBody {
    pub text: String,
}

fn rejection_kind(r: HintRejected) -> &'static str {
    match r {
        HintRejected::TooEarly => "too_early",
        HintRejected::FeatureDisabled => "feature_disabled",
        HintRejected::Empty => "empty",
    }
}

async fn hint(State(st): State<ApiState>, body: Result<Json<HintBody>, JsonRejection>) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(r) => return bad_body(r),
    };
    match st.hub.submit_hint(&body.text) {
        Ok(ack) => (StatusCode::ACCEPTED, Json(ack)).into_response(),
        Err(r) => {
            let status = match r {
                HintRejected::Empty => StatusCode::UNPROCESSABLE_ENTITY,
                HintRejected::TooEarly | HintRejected::FeatureDisabled => StatusCode::CONFLICT,
            };
            api_error(status, "hint_rejected", Some(rejection_kind(r)), r.to_string())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortAck {
    pub abort_requested: bool,
}

async fn abort(State(st): State<ApiState>) -> Response {
    st.hub.abort();
    (StatusCode::ACCEPTED, Json(AbortAck { abort_requested: true })).into_response()
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

fn start_seq(headers: &HeaderMap, query: &EventsQuery) -> u64 {
    headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok())
        .or(query.since)
        .unwrap_or(0)
}

fn sse_event(env: &EventEnvelope) -> Event {
    let value = serde_json::to_value(env).unwrap_or_default();
    let name = value.get("type").and_then(|t| t.as_str()).unwrap_or("message").to_string();
    Event::default()
        .id(env.seq.to_string())
        .event(name)
        .data(value.to_string())
}

/// Replays events after the cursor, then follows live until the session ends.
fn event_stream(hub: Arc<ControlHub>, since: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold((hub, since, false), |(hub, seq, done)| async move {
        if done || ((hub.is_finished() || hub.is_closed()) && hub.events_since(seq).is_empty()) {
            return None;
        }
        let waiter = hub.clone();
        let batch = tokio::task::spawn_blocking(move || waiter.wait_for_events(seq, EVENT_POLL))
            .await
            .unwrap_or_default();
        let next = batch.last().map(|e| e.seq).unwrap_or(seq);
        let finished = batch.is_empty() && (hub.is_finished() || hub.is_closed());
        let events: Vec<Result<Event, Infallible>> = batch.iter().map(|e| Ok(sse_event(e))).collect();
        Some((stream::iter(events), (hub, next, finished)))
    })
    .flatten()
}

async fn events(State(st): State<ApiState>, headers: HeaderMap, Query(q): Query<EventsQuery>) -> Response {
    let since = start_seq(&headers, &q);
    Sse::new(event_stream(st.hub.clone(), since))
        .keep_alive(KeepAlive::default())
        .into_response()
}

/// The API served from a background thread with its own runtime.
pub struct ControlServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl std::fmt::Debug for ControlServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlServer").field("addr", &self.addr).finish_non_exhaustive()
    }
}

impl ControlServer {
    /// Binds and starts serving. Non-loopback addresses need `allow_remote`.
    pub fn start(
        hub: Arc<ControlHub>,
        addr: SocketAddr,
        token: &str,
        allow_remote: bool,
    ) -> Result<Self, ControlError> {
        if token.is_empty() {
            return Err(ControlError::EmptyToken);
        }
        if !addr.ip().is_loopback() && !allow_remote {
            return Err(ControlError::NonLoopback(addr));
        }
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| ControlError::Runtime(e.to_string()))?;
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|e| ControlError::Bind {
                addr,
                reason: e.to_string(),
            })?;
        let bound = listener.local_addr().map_err(|e| ControlError::Bind {
            addr,
            reason: e.to_string(),
        })?;
        let app = router(hub, token);
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("control-api".into())
            .spawn(move || {
                runtime.block_on(async move {
                    let served = axum::serve(listener, app).with_graceful_shutdown(async {
                        let _ = rx.await;
                    });
                    if let Err(e) = served.await {
                        log::error!("control API stopped: {e}");
                    }
                });
                runtime.shutdown_timeout(Duration::from_secs(1));
            })
            .map_err(|e| ControlError::Runtime(e.to_string()))?;
        log::info!("control API listening on http://{bound}");
        Ok(ControlServer {
            addr: bound,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.stop();
    }
}
