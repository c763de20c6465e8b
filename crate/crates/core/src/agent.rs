//! The observe, reason, act loop: one model round trip per step, one tool
//! call per step, a hard step budget, and an append-only trace.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::EchoStudy;
use crate::gateway::{prompt_hash, render_answer_request, render_history, split_completion, Backend, BackendError};
use crate::guidelines::GuidelineIndex;
use crate::protocol::{parse_tool_call, ToolCall, ToolContext, ToolDescriptor, ToolRegistry, ToolResult};
use crate::quantity::{claim_matches, extract_quantities, Unit};
use crate::tools::SEARCH_GUIDELINE;

pub const DEFAULT_BUDGET: u32 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub thought: String,
    /// For unparseable output the name is empty and `raw_text` holds the completion.
    pub action: ToolCall,
    pub result: ToolResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Finished,
    BudgetExhausted,
    Aborted,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        self != SessionStatus::Running
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Finished => "finished",
            Self::BudgetExhausted => "budget_exhausted",
            Self::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedValue {
    pub value: f64,
    pub unit: Unit,
    /// Index into the history of the entry whose result holds the value.
    pub entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UngroundedValue {
    pub value: f64,
    pub unit: Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub cited_values: Vec<CitedValue>,
    pub cited_passages: Vec<String>,
    /// Lengths stated in the answer that no observation supports.
    pub ungrounded: Vec<UngroundedValue>,
}

impl FinalAnswer {
    pub fn is_grounded(&self) -> bool {
        self.ungrounded.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionStarted,
    Thought,
    ToolCall,
    ToolResult,
    Finish,
    ForcedAnswer,
    Aborted,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Finish | Self::ForcedAnswer | Self::Aborted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SessionStarted => "session_started",
            Self::Thought => "thought",
            Self::ToolCall => "tool_call",
            Self::ToolResult => "tool_result",
            Self::Finish => "finish",
            Self::ForcedAnswer => "forced_answer",
            Self::Aborted => "aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub session_id: String,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Value,
}

impl TraceEvent {
    /// Copy with tool latency zeroed.
    pub fn without_timing(&self) -> Self {
        let mut e = self.clone();
        if e.kind == EventKind::ToolResult {
            if let Some(obj) = e.payload.get_mut("result").and_then(Value::as_object_mut) {
                obj.insert("latency_us".into(), json!(0));
            }
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub query: String,
    pub study_id: String,
    pub history: Vec<HistoryEntry>,
    /// Reasoning steps taken; a FINISH step does not count.
    pub step: u32,
    pub budget: u32,
    pub status: SessionStatus,
    pub answer: Option<FinalAnswer>,
    pub events: Vec<TraceEvent>,
    pub round_trips: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("step budget must be at least 1")]
    InvalidBudget,
    #[error("session is {0:?}, not running")]
    NotRunning(SessionStatus),
    #[error("{source}")]
    Backend { source: BackendError, state: Box<SessionState> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortOutcome {
    Aborted,
    NoOp,
}

/// What an observer wants after seeing an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Abort,
}

pub struct SessionEnv<'a> {
    pub study: &'a EchoStudy,
    pub guidelines: Option<&'a GuidelineIndex>,
    pub registry: &'a ToolRegistry,
    pub backend: &'a dyn Backend,
}

pub struct Session<'a> {
    env: SessionEnv<'a>,
    state: SessionState,
}

impl<'a> Session<'a> {
    pub fn new(session_id: impl Into<String>, query: impl Into<String>, budget: u32, env: SessionEnv<'a>) -> Result<Self, SessionError> {
        if budget == 0 {
            return Err(SessionError::InvalidBudget);
        }
        let state = SessionState {
            session_id: session_id.into(),
            query: query.into(),
            study_id: env.study.study_id.clone(),
            history: Vec::new(),
            step: 0,
            budget,
            status: SessionStatus::Running,
            answer: None,
            events: Vec::new(),
            round_trips: 0,
            error: None,
        };
        let mut s = Self { env, state };
        let payload = json!({
            "query": s.state.query,
            "study_id": s.state.study_id,
            "budget": budget,
            "tools": s.env.registry.names(),
            "prompt_hash": prompt_hash(),
        });
        s.emit(EventKind::SessionStarted, payload);
        Ok(s)
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn into_state(self) -> SessionState {
        self.state
    }

    fn emit(&mut self, kind: EventKind, payload: Value) {
        let seq = self.state.events.len() as u64;
        self.state.events.push(TraceEvent { session_id: self.state.session_id.clone(), seq, kind, payload });
    }

    fn tools(&self) -> Vec<&'a ToolDescriptor> {
        self.env.registry.descriptors().collect()
    }

    fn retrieval(&self) -> bool {
        self.env.registry.contains(SEARCH_GUIDELINE)
    }

    fn complete(&mut self, messages: &[crate::gateway::ChatMessage]) -> Result<String, SessionError> {
        self.state.round_trips += 1;
        match self.env.backend.complete(messages) {
            Ok(t) => Ok(t),
            Err(e) => {
                self.abort_with(format!("backend failure: {e}"));
                self.state.error = Some(e.to_string());
                Err(SessionError::Backend { source: e, state: Box::new(self.state.clone()) })
            }
        }
    }

    fn answer(&mut self) -> Result<FinalAnswer, SessionError> {
        let messages = render_answer_request(&self.state.query, &self.state.history, &self.tools(), self.retrieval());
        let text = self.complete(&messages)?;
        Ok(ground_answer(text, &self.state.history))
    }

    /// One reasoning round trip. Either the FINISH branch is taken (and the
    /// answer generated from the history), or exactly one entry is appended.
    pub fn step(&mut self) -> Result<SessionStatus, SessionError> {
        if self.state.status != SessionStatus::Running || self.state.step >= self.state.budget {
            return Err(SessionError::NotRunning(self.state.status));
        }
        let messages = render_history(&self.state.query, &self.state.history, &self.tools(), self.retrieval());
        let completion = self.complete(&messages)?;
        let (thought, call_text) = split_completion(&completion);
        let step = self.state.step;
        let parsed = parse_tool_call(&call_text);
        self.emit(EventKind::Thought, json!({ "step": step, "text": thought }));

        if parsed.as_ref().is_ok_and(ToolCall::is_finish) {
            let answer = self.answer()?;
            self.state.status = SessionStatus::Finished;
            self.emit(EventKind::Finish, json!({ "step": step, "answer": answer }));
            self.state.answer = Some(answer);
            return Ok(self.state.status);
        }

        let (action, result) = match parsed {
            Ok(call) => {
                let ctx = ToolContext { study: self.env.study, guidelines: self.env.guidelines };
                let result = self.env.registry.execute(&call, &ctx);
                (call, result)
            }
            Err(e) => {
                let call = ToolCall { tool_name: String::new(), arguments: BTreeMap::new(), raw_text: completion };
                (call, ToolResult::error(e))
            }
        };
        self.emit(
            EventKind::ToolCall,
            json!({ "step": step, "name": action.tool_name, "arguments": action.arguments, "raw_text": action.raw_text }),
        );
        self.emit(EventKind::ToolResult, json!({ "step": step, "name": action.tool_name, "result": result }));
        self.state.history.push(HistoryEntry { thought, action, result });
        self.state.step += 1;
        Ok(self.state.status)
    }

    /// Generates the answer once the budget is spent.
    pub fn force_answer(&mut self) -> Result<SessionStatus, SessionError> {
        if self.state.status != SessionStatus::Running {
            return Err(SessionError::NotRunning(self.state.status));
        }
        let answer = self.answer()?;
        self.state.status = SessionStatus::BudgetExhausted;
        self.emit(EventKind::ForcedAnswer, json!({ "step": self.state.step, "answer": answer }));
        self.state.answer = Some(answer);
        Ok(self.state.status)
    }

    /// A step while budget remains, otherwise the forced answer.
    pub fn advance(&mut self) -> Result<SessionStatus, SessionError> {
        if self.state.status == SessionStatus::Running && self.state.step >= self.state.budget {
            self.force_answer()
        } else {
            self.step()
        }
    }

    fn abort_with(&mut self, reason: String) {
        self.state.status = SessionStatus::Aborted;
        self.emit(EventKind::Aborted, json!({ "step": self.state.step, "reason": reason }));
    }

    pub fn abort(&mut self, reason: &str) -> AbortOutcome {
        if self.state.status.is_terminal() {
            return AbortOutcome::NoOp;
        }
        self.abort_with(reason.to_string());
        AbortOutcome::Aborted
    }

    /// Runs to a terminal state.
    pub fn run(&mut self) -> Result<&SessionState, SessionError> {
        self.run_observed(&mut |_| Control::Continue)
    }

    /// Runs to a terminal state, showing every event to `observer` as it is
    /// appended. The observer may stop the session between steps.
    pub fn run_observed(&mut self, observer: &mut dyn FnMut(&TraceEvent) -> Control) -> Result<&SessionState, SessionError> {
        let mut seen = 0;
        let mut deliver = |events: &[TraceEvent], seen: &mut usize| -> Control {
            let mut ctl = Control::Continue;
            for e in &events[*seen..] {
                if observer(e) == Control::Abort {
                    ctl = Control::Abort;
                }
            }
            *seen = events.len();
            ctl
        };
        loop {
            let ctl = deliver(&self.state.events, &mut seen);
            if self.state.status.is_terminal() {
                return Ok(&self.state);
            }
            if ctl == Control::Abort {
                self.abort("aborted by operator");
                continue;
            }
            if let Err(e) = self.advance() {
                deliver(&self.state.events, &mut seen);
                return Err(e);
            }
        }
    }
}

/// Runs a whole session and returns its answer with the final state.
pub fn run_session(
    session_id: &str,
    query: &str,
    env: SessionEnv<'_>,
    budget: u32,
) -> Result<(FinalAnswer, SessionState), SessionError> {
    let mut s = Session::new(session_id, query, budget, env)?;
    s.run()?;
    let state = s.into_state();
    let answer = state.answer.clone().unwrap_or_else(|| ground_answer(String::new(), &state.history));
    Ok((answer, state))
}

/// Answer generation over an arbitrary history; a single backend call.
pub fn generate_answer(
    history: &[HistoryEntry],
    query: &str,
    tools: &[&ToolDescriptor],
    backend: &dyn Backend,
) -> Result<FinalAnswer, BackendError> {
    let retrieval = tools.iter().any(|t| t.name == SEARCH_GUIDELINE);
    let text = backend.complete(&render_answer_request(query, history, tools, retrieval))?;
    Ok(ground_answer(text, history))
}

/// Lengths in an observation: numbers under `*_cm` keys, and quantities with
/// a unit inside strings (passage text, for example).
fn collect_lengths(v: &Value, key_is_cm: bool, out: &mut Vec<f64>) {
    match v {
        Value::Number(n) if key_is_cm => out.extend(n.as_f64()),
        Value::String(s) => out.extend(extract_quantities(s).iter().filter_map(|q| q.cm())),
        Value::Array(a) => a.iter().for_each(|x| collect_lengths(x, key_is_cm, out)),
        Value::Object(o) => o.iter().for_each(|(k, x)| collect_lengths(x, k.ends_with("_cm"), out)),
        _ => {}
    }
}

/// Matches every length stated in `text` against numbers in successful
/// observations. Unitless numbers (ratios, frame indices) are not claims.
pub fn ground_answer(text: String, history: &[HistoryEntry]) -> FinalAnswer {
    let evidence: Vec<Vec<f64>> = history
        .iter()
        .map(|e| {
            let mut v = Vec::new();
            if e.result.is_ok() {
                collect_lengths(&e.result.payload, false, &mut v);
            }
            v
        })
        .collect();
    let mut cited_values = Vec::new();
    let mut ungrounded = Vec::new();
    for q in extract_quantities(&text) {
        let Some(unit) = q.unit else { continue };
        let scale = match unit {
            Unit::Cm => 1.0,
            Unit::Mm => 10.0,
        };
        let hit = evidence.iter().position(|nums| nums.iter().any(|n| claim_matches(q.value, q.decimals, n * scale)));
        match hit {
            Some(entry) => cited_values.push(CitedValue { value: q.value, unit, entry }),
            None => ungrounded.push(UngroundedValue { value: q.value, unit }),
        }
    }
    let mut cited_passages = Vec::new();
    for e in history.iter().filter(|e| e.action.tool_name == SEARCH_GUIDELINE && e.result.is_ok()) {
        for hit in e.result.payload["hits"].as_array().into_iter().flatten() {
            if let Some(id) = hit["passage_id"].as_str() {
                if text.contains(id) && !cited_passages.iter().any(|p: &String| p == id) {
                    cited_passages.push(id.to_string());
                }
            }
        }
    }
    FinalAnswer { text, cited_values, cited_passages, ungrounded }
}
