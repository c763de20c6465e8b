//! HTTP service: sessions with resumable event streams, studies and frames,
//! the tool palette, and benchmark runs.
//!
//! Sessions run on the blocking pool. Each one appends its events to an
//! in-process slot and bumps a watch counter; event streams replay the slot
//! from the requested sequence number and then follow it until a terminal
//! event.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use echoagent_core::agent::{
    Control, EventKind, FinalAnswer, Session, SessionEnv, SessionError, SessionState, SessionStatus, TraceEvent,
};
use echoagent_core::bench::{AgentConfig, Judge, RunReport};
use echoagent_core::domain::{EchoStudy, MeasurementKind};
use echoagent_core::gateway::Backend;
use echoagent_core::guidelines::GuidelineIndex;
use echoagent_core::sim::{render_frames, BenchmarkCase};
use echoagent_core::tools::{ToolFlags, MEASURE};
use echoagent_core::vision::NoiseProfile;

use crate::runner::{run_benchmark_parallel, BenchEnv, ToolSource};
use crate::store;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Settings captured when a session is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfigSnapshot {
    pub backend: String,
    pub noise: NoiseProfile,
    pub budget: u32,
    pub flags: ToolFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub study_id: String,
    pub query: String,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub status: SessionStatus,
    pub config: SessionConfigSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follow_up_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<FinalAnswer>,
    pub event_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct SlotInner {
    handle: SessionHandle,
    events: Vec<TraceEvent>,
}

struct SessionSlot {
    inner: Mutex<SlotInner>,
    changed: watch::Sender<usize>,
    abort: AtomicBool,
}

impl SessionSlot {
    fn new(handle: SessionHandle) -> Self {
        let (changed, _) = watch::channel(0);
        Self { inner: Mutex::new(SlotInner { handle, events: Vec::new() }), changed, abort: AtomicBool::new(false) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SlotInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn push(&self, event: &TraceEvent) -> Control {
        let len = {
            let mut inner = self.lock();
            inner.events.push(event.clone());
            inner.handle.event_count = inner.events.len();
            let status = match event.kind {
                EventKind::Finish => Some(SessionStatus::Finished),
                EventKind::ForcedAnswer => Some(SessionStatus::BudgetExhausted),
                EventKind::Aborted => Some(SessionStatus::Aborted),
                _ => None,
            };
            if let Some(s) = status {
                inner.handle.status = s;
                inner.handle.answer = serde_json::from_value(event.payload["answer"].clone()).ok();
            }
            inner.events.len()
        };
        self.changed.send_replace(len);
        if self.abort.load(Ordering::SeqCst) {
            Control::Abort
        } else {
            Control::Continue
        }
    }

    fn finish(&self, state: Option<SessionState>, error: Option<String>) {
        let len = {
            let mut inner = self.lock();
            if let Some(s) = state {
                inner.handle.status = s.status;
                inner.handle.answer = s.answer;
                inner.handle.error = s.error;
            } else {
                inner.handle.status = SessionStatus::Aborted;
            }
            if error.is_some() {
                inner.handle.error = error;
            }
            inner.events.len()
        };
        self.changed.send_replace(len);
    }

    fn handle(&self) -> SessionHandle {
        self.lock().handle.clone()
    }

    /// Events from `from` on, and whether the session has ended.
    fn events_from(&self, from: usize) -> (Vec<TraceEvent>, bool) {
        let inner = self.lock();
        let tail = inner.events.get(from..).map(<[_]>::to_vec).unwrap_or_default();
        (tail, inner.handle.status.is_terminal())
    }
}

/// What a service instance is built from.
pub struct ServiceInputs {
    pub studies: BTreeMap<String, EchoStudy>,
    /// Directory holding the studies' pixel payloads; payloads are rendered
    /// on demand when unset.
    pub pixel_dir: Option<PathBuf>,
    pub guidelines: GuidelineIndex,
    pub backend: Arc<dyn Backend>,
    /// Model judge for benchmark runs; the rule judge when unset.
    pub judge_backend: Option<Arc<dyn Backend>>,
    pub tools: ToolSource,
    pub noise: NoiseProfile,
    pub budget: u32,
    pub flags: ToolFlags,
    pub cases: Vec<BenchmarkCase>,
    pub parallelism: usize,
    pub seeds: BTreeMap<String, u64>,
    pub trace_log: Option<PathBuf>,
}

pub struct ServiceState {
    inputs: ServiceInputs,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    next_id: AtomicU64,
    log_lock: Mutex<()>,
}

impl ServiceState {
    pub fn new(inputs: ServiceInputs) -> Arc<Self> {
        Arc::new(Self { inputs, sessions: RwLock::new(BTreeMap::new()), next_id: AtomicU64::new(1), log_lock: Mutex::new(()) })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    fn study(&self, id: &str) -> ApiResult<&EchoStudy> {
        self.inputs.studies.get(id).ok_or_else(|| ApiError::not_found(format!("unknown study {id}")))
    }

    fn append_log(&self, slot: &SessionSlot) {
        let Some(path) = &self.inputs.trace_log else { return };
        let line = {
            let inner = slot.lock();
            json!({ "handle": inner.handle, "events": inner.events }).to_string()
        };
        let _guard = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let written = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            tracing::warn!(path = %path.display(), error = %e, "trace log append failed");
        }
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", get(stream_events))
        .route("/sessions/{id}/abort", post(abort_session))
        .route("/studies", get(list_studies))
        .route("/studies/{id}/frames/{frame}", get(get_frame))
        .route("/tools", get(list_tools))
        .route("/benchmarks/run", post(run_benchmark))
        .with_state(state)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub study_id: String,
    pub query: String,
    #[serde(default)]
    pub budget: Option<u32>,
    #[serde(default)]
    pub flags: Option<ToolFlags>,
    /// Prior session whose answer the new query builds on.
    #[serde(default)]
    pub follow_up_of: Option<String>,
}

/// The query a follow-up session runs: the prior exchange, then the new question.
pub fn follow_up_query(prior_query: &str, prior_answer: &str, query: &str) -> String {
    format!("Previous question: {prior_query}\nPrevious answer: {prior_answer}\n\nFollow-up question: {query}")
}

async fn create_session(State(state): State<Arc<ServiceState>>, Json(req): Json<CreateSession>) -> ApiResult<impl IntoResponse> {
    let study = state.study(&req.study_id)?.clone();
    let budget = req.budget.unwrap_or(state.inputs.budget);
    if budget == 0 {
        return Err(ApiError::bad_request("budget must be at least 1"));
    }
    if req.query.trim().is_empty() {
        return Err(ApiError::bad_request("query is empty"));
    }
    let query = match &req.follow_up_of {
        None => req.query.clone(),
        Some(prior) => {
            let h = state.session(prior)?.handle();
            let answer = h
                .answer
                .filter(|_| h.status.is_terminal())
                .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("session {prior} has no final answer yet")))?;
            follow_up_query(&h.query, &answer.text, &req.query)
        }
    };
    let flags = req.flags.unwrap_or(state.inputs.flags);
    let id = format!("s-{:06}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let handle = SessionHandle {
        session_id: id.clone(),
        study_id: study.study_id.clone(),
        query: query.clone(),
        created_at: now_ms(),
        status: SessionStatus::Running,
        config: SessionConfigSnapshot {
            backend: state.inputs.backend.describe(),
            noise: state.inputs.noise.clone(),
            budget,
            flags,
        },
        follow_up_of: req.follow_up_of.clone(),
        answer: None,
        event_count: 0,
        error: None,
    };
    let slot = Arc::new(SessionSlot::new(handle.clone()));
    state.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), slot.clone());

    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let registry = worker.inputs.tools.registry(&worker.inputs.noise, flags);
        let env = SessionEnv {
            study: &study,
            guidelines: Some(&worker.inputs.guidelines),
            registry: &registry,
            backend: worker.inputs.backend.as_ref(),
        };
        let (state_out, error) = match Session::new(id, query, budget, env) {
            Ok(mut session) => match session.run_observed(&mut |e| slot.push(e)) {
                Ok(s) => (Some(s.clone()), None),
                Err(SessionError::Backend { source, state }) => (Some(*state), Some(source.to_string())),
                Err(e) => (Some(session.into_state()), Some(e.to_string())),
            },
            Err(e) => (None, Some(e.to_string())),
        };
        slot.finish(state_out, error);
        worker.append_log(&slot);
    });
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn get_session(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Json<SessionHandle>> {
    Ok(Json(state.session(&id)?.handle()))
}

#[derive(Debug, Default, Deserialize)]
pub struct EventsQuery {
    #[serde(default)]
    pub from: Option<usize>,
}

fn sse_event(e: &TraceEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.kind.as_str())
        .json_data(e)
        .unwrap_or_else(|_| Event::default().event("error").data("event not serializable"))
}

struct Cursor {
    slot: Arc<SessionSlot>,
    rx: watch::Receiver<usize>,
    next: usize,
    done: bool,
}

/// The suffix of the session's events from `from`, followed live until a
/// terminal event.
fn event_stream(slot: Arc<SessionSlot>, from: usize) -> impl Stream<Item = TraceEvent> {
    let rx = slot.changed.subscribe();
    let cursor = Cursor { slot, rx, next: from, done: false };
    stream::unfold(cursor, |mut c| async move {
        if c.done {
            return None;
        }
        loop {
            c.rx.borrow_and_update();
            let (batch, ended) = c.slot.events_from(c.next);
            if !batch.is_empty() {
                c.next += batch.len();
                c.done = ended || batch.iter().any(|e| e.kind.is_terminal());
                return Some((batch, c));
            }
            if ended || c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
    .flat_map(|batch| stream::iter(batch))
}

async fn stream_events(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let slot = state.session(&id)?;
    // A reconnecting browser sends the last id it saw.
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map(|n| n + 1);
    let from = q.from.into_iter().chain(resume).max().unwrap_or(0);
    let events = event_stream(slot, from).map(|e| Ok(sse_event(&e)));
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn abort_session(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = state.session(&id)?;
    let status = slot.handle().status;
    if status.is_terminal() {
        return Ok((StatusCode::OK, Json(json!({ "session_id": id, "outcome": "no_op", "status": status })))
            .into_response());
    }
    slot.abort.store(true, Ordering::SeqCst);
    Ok((StatusCode::ACCEPTED, Json(json!({ "session_id": id, "outcome": "aborting" }))).into_response())
}

#[derive(Debug, Serialize)]
struct StudySummary<'a> {
    study_id: &'a str,
    view: &'a str,
    frame_count: u32,
    frame_rate: f64,
    has_pixels: bool,
}

async fn list_studies(State(state): State<Arc<ServiceState>>) -> Json<Value> {
    let list: Vec<StudySummary<'_>> = state
        .inputs
        .studies
        .values()
        .map(|s| StudySummary {
            study_id: &s.study_id,
            view: s.view.name(),
            frame_count: s.frame_count,
            frame_rate: s.frame_rate,
            has_pixels: s.pixels.is_some(),
        })
        .collect();
    Json(json!({ "studies": list }))
}

/// A measurement drawn on a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub session_id: String,
    pub kind: MeasurementKind,
    pub value_cm: f64,
    pub endpoints: Option<Vec<[f64; 2]>>,
    pub label: String,
}

fn overlays_in(events: &[TraceEvent], frame: u32) -> Vec<Overlay> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::ToolResult && e.payload["name"] == MEASURE && e.payload["result"]["status"] == "ok")
        .filter_map(|e| {
            let p = &e.payload["result"]["payload"];
            if p["frame"].as_u64() != Some(frame as u64) {
                return None;
            }
            let kind: MeasurementKind = serde_json::from_value(p["kind"].clone()).ok()?;
            let value_cm = p["value_cm"].as_f64()?;
            Some(Overlay {
                session_id: e.session_id.clone(),
                kind,
                value_cm,
                endpoints: serde_json::from_value(p["endpoints"].clone()).ok().flatten(),
                label: format!("{} {value_cm:.1} cm", kind.name()),
            })
        })
        .collect()
}

#[derive(Debug, Default, Deserialize)]
pub struct FrameQuery {
    /// Restrict overlays to one session.
    #[serde(default)]
    pub session: Option<String>,
}

async fn get_frame(
    State(state): State<Arc<ServiceState>>,
    Path((id, frame)): Path<(String, u32)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult<Json<Value>> {
    let study = state.study(&id)?;
    if frame >= study.frame_count {
        return Err(ApiError::not_found(format!("frame {frame} outside [0, {})", study.frame_count)));
    }
    let slots: Vec<Arc<SessionSlot>> = match &q.session {
        Some(sid) => vec![state.session(sid)?],
        None => state.sessions.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect(),
    };
    let mut overlays = Vec::new();
    for slot in slots {
        let inner = slot.lock();
        if inner.handle.study_id == study.study_id {
            overlays.extend(overlays_in(&inner.events, frame));
        }
    }
    let (width, height, pixels) = match &study.pixels {
        Some(px) => {
            let all = match &state.inputs.pixel_dir {
                Some(dir) => store::read_pixels(dir, study)
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?,
                None => render_frames(study),
            };
            let n = (px.width * px.height) as usize;
            let slice = all.map(|a| a[frame as usize * n..(frame as usize + 1) * n].to_vec());
            (Some(px.width), Some(px.height), slice)
        }
        None => (None, None, None),
    };
    Ok(Json(json!({
        "study_id": study.study_id,
        "frame": frame,
        "placeholder": pixels.is_none(),
        "width": width,
        "height": height,
        "encoding": pixels.as_ref().map(|_| "gray8"),
        "pixels": pixels.map(|p| base64::engine::general_purpose::STANDARD.encode(p)),
        "phase": study.nearest_phase(frame).abbrev(),
        "overlays": overlays,
    })))
}

#[derive(Debug, Default, Deserialize)]
pub struct ToolsQuery {
    #[serde(default)]
    pub feasibility: Option<bool>,
    #[serde(default)]
    pub retrieval: Option<bool>,
}

async fn list_tools(State(state): State<Arc<ServiceState>>, Query(q): Query<ToolsQuery>) -> Json<Value> {
    let flags = ToolFlags {
        feasibility: q.feasibility.unwrap_or(state.inputs.flags.feasibility),
        retrieval: q.retrieval.unwrap_or(state.inputs.flags.retrieval),
    };
    Json(state.inputs.tools.registry(&state.inputs.noise, flags).export_schema())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct BenchmarkRequest {
    /// Cases to run; the service's benchmark file when absent.
    pub cases: Option<Vec<BenchmarkCase>>,
    /// Run only the first `limit` cases.
    pub limit: Option<usize>,
    pub flags: Option<ToolFlags>,
    pub budget: Option<u32>,
}

async fn run_benchmark(State(state): State<Arc<ServiceState>>, Json(req): Json<BenchmarkRequest>) -> ApiResult<Json<RunReport>> {
    let budget = req.budget.unwrap_or(state.inputs.budget);
    if budget == 0 {
        return Err(ApiError::bad_request("budget must be at least 1"));
    }
    let mut cases = req.cases.unwrap_or_else(|| state.inputs.cases.clone());
    if let Some(n) = req.limit {
        cases.truncate(n);
    }
    let agent = AgentConfig { budget, flags: req.flags.unwrap_or(state.inputs.flags), noise: state.inputs.noise.clone() };
    let worker = state.clone();
    let report = tokio::task::spawn_blocking(move || {
        let i = &worker.inputs;
        let judge = match &i.judge_backend {
            Some(b) => Judge::Model(b.as_ref()),
            None => Judge::Rule,
        };
        let env = BenchEnv {
            studies: &i.studies,
            guidelines: Some(&i.guidelines),
            backend: i.backend.as_ref(),
            judge: &judge,
            tools: &i.tools,
            parallelism: i.parallelism,
            seeds: i.seeds.clone(),
            metrics: false,
        };
        run_benchmark_parallel(&cases, &env, &agent)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(report))
}
