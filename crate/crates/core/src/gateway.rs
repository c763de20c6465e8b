//! The orchestrating model behind a narrow `complete(messages) -> text`
//! contract, plus the prompt layout the loop sends it.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::HistoryEntry;
use crate::protocol::{ResultStatus, ToolDescriptor, FINISH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid backend request: {0}")]
    InvalidRequest(String),
}

/// The language model. Implementations must be safe to share across sessions.
pub trait Backend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;

    /// Stable identity recorded in run fingerprints.
    fn describe(&self) -> String {
        "backend".into()
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

pub const PROMPT_VERSION: &str = "echoagent-prompt/1";

const SYSTEM_PREAMBLE: &str = "You are an echocardiography assistant. You answer a clinical question about one echo clip by calling tools, one call per turn, and reading their observations.

Reply format for every turn: optionally a short line of reasoning, then exactly one JSON object
{\"name\": \"<tool name>\", \"arguments\": {...}}
When you have enough evidence, reply with {\"name\": \"FINISH\", \"arguments\": {}}.
Use only the tools listed below and only their listed arguments. Report lengths in cm.";

const RETRIEVAL_NOTE: &str =
    "Look up reference ranges and thresholds with search_guideline rather than relying on memory.";

/// Sent as the final user message when the loop asks for the answer.
pub const ANSWER_REQUEST: &str = "Answer the question now using only the observations above. \
State each measured value with its unit, and cite guideline passages by passage_id when you used them. \
Do not call any tool.";

/// Hash of every fixed prompt string; reports carry it so results are tied to
/// the exact wording.
pub fn prompt_hash() -> String {
    let mut h = Sha256::new();
    for part in [PROMPT_VERSION, SYSTEM_PREAMBLE, RETRIEVAL_NOTE, ANSWER_REQUEST, OBSERVATION_PREFIX] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const OBSERVATION_PREFIX: &str = "Observation";

fn system_message(tools: &[&ToolDescriptor], retrieval: bool) -> String {
    let schemas: Vec<serde_json::Value> = tools.iter().map(|t| t.json_schema()).collect();
    let mut s = String::from(SYSTEM_PREAMBLE);
    if retrieval {
        s.push_str("\n");
        s.push_str(RETRIEVAL_NOTE);
    }
    s.push_str("\n\nTools:\n");
    s.push_str(&serde_json::to_string_pretty(&schemas).unwrap_or_default());
    s
}

/// The assistant turn for one history entry.
pub fn render_action(entry: &HistoryEntry) -> String {
    if entry.action.tool_name.is_empty() {
        return entry.action.raw_text.clone();
    }
    let wire = entry.action.to_wire();
    if entry.thought.is_empty() {
        wire
    } else {
        format!("{}\n{wire}", entry.thought)
    }
}

/// The observation turn for one history entry: a header line, then the
/// payload JSON on the next line.
pub fn render_observation(step: usize, entry: &HistoryEntry) -> String {
    let r = &entry.result;
    let tool = if entry.action.tool_name.is_empty() { "<unparsed>" } else { &entry.action.tool_name };
    match (r.status, &r.error) {
        (ResultStatus::Ok, _) => format!(
            "{OBSERVATION_PREFIX} {step} from {tool}: ok\n{}",
            serde_json::to_string(&r.payload).unwrap_or_default()
        ),
        (ResultStatus::Error, Some(e)) => {
            format!("{OBSERVATION_PREFIX} {step} from {tool}: error {}\n{}", e.class, e.detail)
        }
        (ResultStatus::Error, None) => format!("{OBSERVATION_PREFIX} {step} from {tool}: error\n"),
    }
}

/// `[system, user(Q), (assistant action, user observation) per entry]`.
pub fn render_history(
    query: &str,
    history: &[HistoryEntry],
    tools: &[&ToolDescriptor],
    retrieval: bool,
) -> Vec<ChatMessage> {
    let mut out = Vec::with_capacity(2 + 2 * history.len());
    out.push(ChatMessage::system(system_message(tools, retrieval)));
    out.push(ChatMessage::user(query));
    for (i, e) in history.iter().enumerate() {
        out.push(ChatMessage::assistant(render_action(e)));
        out.push(ChatMessage::user(render_observation(i, e)));
    }
    out
}

/// Messages for the answer turn: the rendered history plus [`ANSWER_REQUEST`].
pub fn render_answer_request(
    query: &str,
    history: &[HistoryEntry],
    tools: &[&ToolDescriptor],
    retrieval: bool,
) -> Vec<ChatMessage> {
    let mut m = render_history(query, history, tools, retrieval);
    m.push(ChatMessage::user(ANSWER_REQUEST));
    m
}

pub fn is_answer_request(messages: &[ChatMessage]) -> bool {
    messages.last().is_some_and(|m| m.role == Role::User && m.content == ANSWER_REQUEST)
}

/// Number of assistant turns already in the conversation.
pub fn step_index(messages: &[ChatMessage]) -> usize {
    messages.iter().filter(|m| m.role == Role::Assistant).count()
}

/// Splits a completion into the free-text thought and the structured call
/// text. The call is the last well-formed top-level JSON object; without one,
/// the whole trimmed text is handed to the parser (and usually rejected). A
/// bare final line `FINISH` is also accepted as the sentinel.
pub fn split_completion(text: &str) -> (String, String) {
    let bytes = text.as_bytes();
    let mut last: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
            if let Some(Ok(serde_json::Value::Object(_))) = stream.next() {
                let end = i + stream.byte_offset();
                last = Some((i, end));
                i = end;
                continue;
            }
        }
        i += 1;
    }
    match last {
        Some((s, e)) => (text[..s].trim().to_string(), text[s..e].to_string()),
        None => {
            let trimmed = text.trim();
            let (head, tail) = match trimmed.rfind('\n') {
                Some(n) => (&trimmed[..n], trimmed[n + 1..].trim()),
                None => ("", trimmed),
            };
            if tail.eq_ignore_ascii_case(FINISH) {
                (head.trim().to_string(), format!("{{\"name\":\"{FINISH}\",\"arguments\":{{}}}}"))
            } else {
                (String::new(), trimmed.to_string())
            }
        }
    }
}

/// When a scripted turn fires.
#[derive(Clone)]
pub enum TurnMatch {
    /// The reasoning turn with this many prior assistant messages.
    Step(usize),
    /// The answer turn.
    Answer,
    /// Any turn whose rendered messages satisfy the predicate.
    When(Arc<dyn Fn(&[ChatMessage]) -> bool + Send + Sync>),
}

impl fmt::Debug for TurnMatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TurnMatch::Step(n) => write!(f, "Step({n})"),
            TurnMatch::Answer => write!(f, "Answer"),
            TurnMatch::When(_) => write!(f, "When(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptTurn {
    pub when: TurnMatch,
    pub emit: String,
}

/// A deterministic test double. The first matching turn wins; reasoning
/// turns with no match emit `FINISH`, answer turns emit `default_answer`.
#[derive(Debug)]
pub struct ScriptedBackend {
    turns: Vec<ScriptTurn>,
    default_step: String,
    default_answer: String,
    calls: AtomicUsize,
    name: String,
}

impl ScriptedBackend {
    pub fn new(turns: Vec<ScriptTurn>) -> Self {
        Self {
            turns,
            default_step: format!("{{\"name\":\"{FINISH}\",\"arguments\":{{}}}}"),
            default_answer: "No further findings.".into(),
            calls: AtomicUsize::new(0),
            name: "scripted".into(),
        }
    }

    /// Emits the given texts at steps 0, 1, 2, … and `answer` for the answer turn.
    pub fn steps<S: Into<String>>(steps: impl IntoIterator<Item = S>, answer: impl Into<String>) -> Self {
        let mut turns: Vec<ScriptTurn> = steps
            .into_iter()
            .enumerate()
            .map(|(i, s)| ScriptTurn { when: TurnMatch::Step(i), emit: s.into() })
            .collect();
        turns.insert(0, ScriptTurn { when: TurnMatch::Answer, emit: answer.into() });
        Self::new(turns)
    }

    /// A backend that emits `text` on every reasoning turn.
    pub fn repeating(text: impl Into<String>, answer: impl Into<String>) -> Self {
        let mut b = Self::new(vec![ScriptTurn { when: TurnMatch::Answer, emit: answer.into() }]);
        b.default_step = text.into();
        b
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_default_answer(mut self, answer: impl Into<String>) -> Self {
        self.default_answer = answer.into();
        self
    }

    /// Round trips served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let answering = is_answer_request(messages);
        let step = step_index(messages);
        let hit = self.turns.iter().find(|t| match &t.when {
            TurnMatch::Step(n) => !answering && *n == step,
            TurnMatch::Answer => answering,
            TurnMatch::When(p) => p(messages),
        });
        Ok(match hit {
            Some(t) => t.emit.clone(),
            None if answering => self.default_answer.clone(),
            None => self.default_step.clone(),
        })
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// Wraps a closure as a backend.
pub struct FnBackend<F> {
    f: F,
    name: String,
}

impl<F> FnBackend<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { f, name: name.into() }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (self.f)(messages)
    }

    fn describe(&self) -> String {
        self.name.clone()
    }
}

/// Boxed backend, for configuration-driven selection.
pub type DynBackend = Box<dyn Backend>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::HistoryEntry;
    use crate::protocol::{parse_tool_call, ProtocolError, ToolCall, ToolResult};
    use crate::tools::{oracle_registry, ToolFlags};
    use crate::vision::NoiseProfile;
    use alloc::collections::BTreeMap;
    use serde_json::json;

    fn entry(name: &str, result: ToolResult) -> HistoryEntry {
        HistoryEntry { thought: "check".into(), action: ToolCall::new(name, BTreeMap::new()), result }
    }

    #[test]
    fn empty_history_renders_system_and_question() {
        let reg = oracle_registry(&NoiseProfile::zero(0), ToolFlags::FULL);
        let tools: Vec<_> = reg.descriptors().collect();
        let m = render_history("What is the IVS?", &[], &tools, true);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].role, Role::System);
        assert!(m[0].content.contains("search_guideline") && m[0].content.contains("FINISH"));
        assert_eq!(m[1], ChatMessage::user("What is the IVS?"));
    }

    #[test]
    fn layout_is_two_plus_two_per_entry() {
        let h = [entry("detect_phases", ToolResult::ok(json!({"ed_frames":[0]}))), entry("measure", ToolResult::ok(json!({"value_cm":4.6})))];
        let m = render_history("q", &h, &[], false);
        assert_eq!(m.len(), 6);
        assert_eq!(m[2].role, Role::Assistant);
        assert_eq!(m[3].role, Role::User);
    }

    #[test]
    fn error_observation_names_its_class() {
        let h = [entry("segment_mitral", ToolResult::error(ProtocolError::unknown_tool("no tool named 'segment_mitral'")))];
        let m = render_history("q", &h, &[], false);
        assert!(m[3].content.contains("UnknownTool"), "{}", m[3].content);
    }

    #[test]
    fn rendering_is_injective_on_results() {
        let a = [entry("measure", ToolResult::ok(json!({"value_cm":4.6})))];
        let b = [entry("measure", ToolResult::ok(json!({"value_cm":4.7})))];
        assert_ne!(render_history("q", &a, &[], false), render_history("q", &b, &[], false));
        let mut c = a.clone();
        c[0].result.latency_us = 999;
        assert_eq!(render_history("q", &a, &[], false), render_history("q", &c, &[], false));
    }

    #[test]
    fn split_takes_last_object_and_leading_prose() {
        let (t, c) = split_completion("I need phases first.\n{\"name\":\"detect_phases\",\"arguments\":{}}");
        assert_eq!(t, "I need phases first.");
        assert_eq!(parse_tool_call(&c).unwrap().tool_name, "detect_phases");
        let (_, c) = split_completion(r#"{"a":1} then {"name":"measure","arguments":{"kind":"IVS","frame":{"x":1}}}"#);
        assert!(c.starts_with(r#"{"name":"measure""#));
        let (t, c) = split_completion("done\nFINISH");
        assert_eq!(t, "done");
        assert!(parse_tool_call(&c).unwrap().is_finish());
        let (_, c) = split_completion("{name: finish");
        assert_eq!(c, "{name: finish");
    }

    #[test]
    fn scripted_backend_is_deterministic() {
        let b = ScriptedBackend::steps(["{\"name\":\"detect_phases\",\"arguments\":{}}"], "The IVS is 1.0 cm.");
        let m = render_history("q", &[], &[], false);
        assert_eq!(b.complete(&m).unwrap(), "{\"name\":\"detect_phases\",\"arguments\":{}}");
        assert_eq!(b.complete(&m).unwrap(), b.complete(&m).unwrap());
        let mut later = m.clone();
        later.push(ChatMessage::assistant("x"));
        later.push(ChatMessage::user("y"));
        assert!(b.complete(&later).unwrap().contains(FINISH));
        later.push(ChatMessage::user(ANSWER_REQUEST));
        assert_eq!(b.complete(&later).unwrap(), "The IVS is 1.0 cm.");
        assert_eq!(b.calls(), 5);
    }

    #[test]
    fn prompt_hash_is_stable_hex() {
        let h = prompt_hash();
        assert_eq!(h.len(), 64);
        assert_eq!(h, prompt_hash());
    }
}
