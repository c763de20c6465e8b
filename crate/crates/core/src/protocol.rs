//! Typed tool registry: parsing, validation and dispatch of structured tool
//! calls. This is the boundary where hallucinated tool names and arguments
//! are caught and turned into error observations.
//!
//! Wire format of a call: `{"name": <string>, "arguments": <object>}`. The
//! arguments may also arrive as a string holding a JSON object, which is how
//! OpenAI-style backends encode them.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::time::Duration;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::domain::{normalize_label, EchoStudy};
use crate::guidelines::GuidelineIndex;

/// Loop-level sentinel that ends reasoning. Never registered as a tool.
pub const FINISH: &str = "FINISH";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProtocolErrorClass {
    Malformed,
    UnknownTool,
    InvalidArguments,
    ExecutionFailure,
}

impl ProtocolErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Malformed => "Malformed",
            Self::UnknownTool => "UnknownTool",
            Self::InvalidArguments => "InvalidArguments",
            Self::ExecutionFailure => "ExecutionFailure",
        }
    }

    /// Classes caused by the orchestrating model rather than by a tool.
    pub fn is_call_error(self) -> bool {
        !matches!(self, Self::ExecutionFailure)
    }
}

impl fmt::Display for ProtocolErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{class}: {detail}")]
pub struct ProtocolError {
    pub class: ProtocolErrorClass,
    pub detail: String,
}

impl ProtocolError {
    pub fn new(class: ProtocolErrorClass, detail: impl Into<String>) -> Self {
        Self { class, detail: detail.into() }
    }

    pub fn malformed(detail: impl Into<String>) -> Self {
        Self::new(ProtocolErrorClass::Malformed, detail)
    }

    pub fn unknown_tool(detail: impl Into<String>) -> Self {
        Self::new(ProtocolErrorClass::UnknownTool, detail)
    }

    pub fn invalid_arguments(detail: impl Into<String>) -> Self {
        Self::new(ProtocolErrorClass::InvalidArguments, detail)
    }

    pub fn execution(detail: impl Into<String>) -> Self {
        Self::new(ProtocolErrorClass::ExecutionFailure, detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("tool '{0}' is already registered")]
    DuplicateTool(String),
    #[error("tool '{tool}' declares parameter '{param}' twice")]
    DuplicateParameter { tool: String, param: String },
    #[error("'{0}' is reserved for the loop sentinel")]
    ReservedName(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamType {
    Text,
    Integer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<i64>,
    },
    Number,
    Boolean,
    /// Matched case-insensitively, canonicalized to the listed spelling.
    Enum { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub description: String,
    #[serde(flatten)]
    pub ty: ParamType,
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

impl ParamSpec {
    pub fn required(name: &str, description: &str, ty: ParamType) -> Self {
        Self { name: name.into(), description: description.into(), ty, required: true, default: None }
    }

    pub fn optional(name: &str, description: &str, ty: ParamType, default: Option<Value>) -> Self {
        Self { name: name.into(), description: description.into(), ty, required: false, default }
    }
}

/// Which context a tool runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolTarget {
    Study,
    Guidelines,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultField {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
    pub result: Vec<ResultField>,
    pub target: ToolTarget,
}

impl ToolDescriptor {
    /// Function-calling JSON schema for prompts and tool palettes.
    pub fn json_schema(&self) -> Value {
        let mut props = serde_json::Map::new();
        let mut required = Vec::new();
        for p in &self.params {
            let mut prop = match &p.ty {
                ParamType::Text => json!({"type": "string"}),
                ParamType::Integer { min, max } => {
                    let mut v = json!({"type": "integer"});
                    if let Some(m) = min {
                        v["minimum"] = json!(m);
                    }
                    if let Some(m) = max {
                        v["maximum"] = json!(m);
                    }
                    v
                }
                ParamType::Number => json!({"type": "number"}),
                ParamType::Boolean => json!({"type": "boolean"}),
                ParamType::Enum { values } => json!({"type": "string", "enum": values}),
            };
            prop["description"] = json!(p.description);
            if let Some(d) = &p.default {
                prop["default"] = d.clone();
            }
            props.insert(p.name.clone(), prop);
            if p.required {
                required.push(Value::String(p.name.clone()));
            }
        }
        json!({
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": props,
                "required": required,
                "additionalProperties": false,
            },
            "returns": self.result.iter().map(|r| json!({"name": r.name, "description": r.description})).collect::<Vec<_>>(),
        })
    }
}

/// A parsed, not yet validated, tool call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub arguments: BTreeMap<String, Value>,
    /// Original model output the call was parsed from.
    pub raw_text: String,
}

/// Equality covers the structured fields only; `raw_text` is provenance.
impl PartialEq for ToolCall {
    fn eq(&self, other: &Self) -> bool {
        self.tool_name == other.tool_name && self.arguments == other.arguments
    }
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, arguments: BTreeMap<String, Value>) -> Self {
        let mut call = Self { tool_name: tool_name.into(), arguments, raw_text: String::new() };
        call.raw_text = call.to_wire();
        call
    }

    pub fn is_finish(&self) -> bool {
        self.tool_name.eq_ignore_ascii_case(FINISH)
    }

    pub fn to_wire(&self) -> String {
        json!({"name": self.tool_name, "arguments": self.arguments}).to_string()
    }
}

struct UniqueArgs(BTreeMap<String, Value>);

impl<'de> Deserialize<'de> for UniqueArgs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct ArgsVisitor;

        impl<'de> Visitor<'de> for ArgsVisitor {
            type Value = UniqueArgs;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an arguments object or a string holding one")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<UniqueArgs, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    if out.contains_key(&k) {
                        return Err(de::Error::custom(format!("duplicate argument '{k}'")));
                    }
                    out.insert(k, v);
                }
                Ok(UniqueArgs(out))
            }

            fn visit_str<E: de::Error>(self, s: &str) -> Result<UniqueArgs, E> {
                serde_json::from_str::<UniqueArgs>(s).map_err(|e| E::custom(format!("arguments string: {e}")))
            }

            fn visit_unit<E: de::Error>(self) -> Result<UniqueArgs, E> {
                Ok(UniqueArgs(BTreeMap::new()))
            }
        }

        d.deserialize_any(ArgsVisitor)
    }
}

#[derive(Deserialize)]
struct WireCall {
    name: String,
    #[serde(default)]
    arguments: Option<UniqueArgs>,
}

/// Parses one structured call. Never panics; every failure is `Malformed`.
pub fn parse_tool_call(raw: &str) -> Result<ToolCall, ProtocolError> {
    let wire: WireCall = serde_json::from_str(raw.trim())
        .map_err(|e| ProtocolError::malformed(format!("not a tool call object: {e}")))?;
    if wire.name.trim().is_empty() {
        return Err(ProtocolError::malformed("empty tool name"));
    }
    Ok(ToolCall {
        tool_name: wire.name,
        arguments: wire.arguments.map(|a| a.0).unwrap_or_default(),
        raw_text: raw.to_string(),
    })
}

/// Byte-level entry point; invalid UTF-8 is `Malformed`.
pub fn parse_tool_call_bytes(raw: &[u8]) -> Result<ToolCall, ProtocolError> {
    match core::str::from_utf8(raw) {
        Ok(s) => parse_tool_call(s),
        Err(e) => Err(ProtocolError::malformed(format!("invalid utf-8: {e}"))),
    }
}

/// A call whose arguments passed the descriptor's schema, with defaults
/// filled in and enum values canonicalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedCall {
    pub tool_name: String,
    pub arguments: BTreeMap<String, Value>,
}

impl ValidatedCall {
    pub fn str_arg(&self, name: &str) -> Option<&str> {
        self.arguments.get(name).and_then(Value::as_str)
    }

    pub fn int_arg(&self, name: &str) -> Option<i64> {
        self.arguments.get(name).and_then(Value::as_i64)
    }

    pub fn as_call(&self) -> ToolCall {
        ToolCall::new(self.tool_name.clone(), self.arguments.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Error,
}

/// Observation returned to the loop. `error` is present iff `status` is `Error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub status: ResultStatus,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ProtocolError>,
    /// Wall-clock handler time. Not part of rendered history or reports.
    #[serde(default)]
    pub latency_us: u64,
}

impl ToolResult {
    pub fn ok(payload: Value) -> Self {
        Self { status: ResultStatus::Ok, payload, error: None, latency_us: 0 }
    }

    pub fn error(err: ProtocolError) -> Self {
        Self { status: ResultStatus::Error, payload: Value::Null, error: Some(err), latency_us: 0 }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResultStatus::Ok
    }

    pub fn error_class(&self) -> Option<ProtocolErrorClass> {
        self.error.as_ref().map(|e| e.class)
    }

    pub fn latency(&self) -> Duration {
        Duration::from_micros(self.latency_us)
    }

    /// Copy with the latency zeroed, for timing-free exports.
    pub fn without_timing(&self) -> Self {
        Self { latency_us: 0, ..self.clone() }
    }
}

/// A handler's refusal or failure.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ToolFailure(pub String);

impl ToolFailure {
    pub fn new(detail: impl Into<String>) -> Self {
        Self(detail.into())
    }
}

/// What a handler gets to see. Study tools never see the guideline store and
/// the retrieval tool never sees the video.
pub enum ToolInput<'a> {
    Study(&'a EchoStudy),
    Guidelines(&'a GuidelineIndex),
}

pub struct ToolContext<'a> {
    pub study: &'a EchoStudy,
    pub guidelines: Option<&'a GuidelineIndex>,
}

pub type ToolHandler =
    Box<dyn Fn(&ValidatedCall, ToolInput<'_>) -> Result<Value, ToolFailure> + Send + Sync>;

struct RegisteredTool {
    descriptor: ToolDescriptor,
    handler: ToolHandler,
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: Vec<RegisteredTool>,
    by_name: BTreeMap<String, usize>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolRegistry").field("tools", &self.names()).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, descriptor: ToolDescriptor, handler: ToolHandler) -> Result<(), RegistryError> {
        if descriptor.name.eq_ignore_ascii_case(FINISH) {
            return Err(RegistryError::ReservedName(descriptor.name));
        }
        if self.by_name.contains_key(&descriptor.name) {
            return Err(RegistryError::DuplicateTool(descriptor.name));
        }
        let mut seen = BTreeMap::new();
        for p in &descriptor.params {
            if seen.insert(p.name.as_str(), ()).is_some() {
                return Err(RegistryError::DuplicateParameter {
                    tool: descriptor.name.clone(),
                    param: p.name.clone(),
                });
            }
        }
        self.by_name.insert(descriptor.name.clone(), self.tools.len());
        self.tools.push(RegisteredTool { descriptor, handler });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tools.iter().map(|t| t.descriptor.name.as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn descriptor(&self, name: &str) -> Option<&ToolDescriptor> {
        self.by_name.get(name).map(|i| &self.tools[*i].descriptor)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.tools.iter().map(|t| &t.descriptor)
    }

    /// Tool palette document in registration order.
    pub fn export_schema(&self) -> Value {
        json!({
            "schema": "echoagent-tools/1",
            "tools": self.descriptors().map(ToolDescriptor::json_schema).collect::<Vec<_>>(),
        })
    }

    pub fn validate(&self, call: &ToolCall) -> Result<ValidatedCall, ProtocolError> {
        let descriptor = self.descriptor(&call.tool_name).ok_or_else(|| {
            ProtocolError::unknown_tool(format!(
                "no tool named '{}'; available: {}",
                call.tool_name,
                self.names().join(", ")
            ))
        })?;
        for key in call.arguments.keys() {
            if !descriptor.params.iter().any(|p| &p.name == key) {
                return Err(ProtocolError::invalid_arguments(format!(
                    "unexpected argument '{key}' for {}",
                    descriptor.name
                )));
            }
        }
        let mut arguments = BTreeMap::new();
        for spec in &descriptor.params {
            match call.arguments.get(&spec.name) {
                Some(value) => {
                    let v = check_value(spec, value).map_err(|why| {
                        ProtocolError::invalid_arguments(format!(
                            "argument '{}' of {}: {why}",
                            spec.name, descriptor.name
                        ))
                    })?;
                    arguments.insert(spec.name.clone(), v);
                }
                None if spec.required => {
                    return Err(ProtocolError::invalid_arguments(format!(
                        "missing required argument '{}' for {}",
                        spec.name, descriptor.name
                    )))
                }
                None => {
                    if let Some(d) = &spec.default {
                        arguments.insert(spec.name.clone(), d.clone());
                    }
                }
            }
        }
        Ok(ValidatedCall { tool_name: descriptor.name.clone(), arguments })
    }

    /// Runs the handler exactly once. Failures (and, with `std`, panics) become
    /// error results; nothing propagates.
    pub fn dispatch(&self, call: &ValidatedCall, ctx: &ToolContext<'_>) -> ToolResult {
        let Some(idx) = self.by_name.get(&call.tool_name) else {
            return ToolResult::error(ProtocolError::unknown_tool(format!(
                "no tool named '{}'",
                call.tool_name
            )));
        };
        let tool = &self.tools[*idx];
        let input = match tool.descriptor.target {
            ToolTarget::Study => ToolInput::Study(ctx.study),
            ToolTarget::Guidelines => match ctx.guidelines {
                Some(g) => ToolInput::Guidelines(g),
                None => {
                    return ToolResult::error(ProtocolError::execution(
                        "guideline store is not available in this session",
                    ))
                }
            },
        };
        let clock = Stopwatch::start();
        let outcome = invoke(&tool.handler, call, input);
        let latency_us = clock.elapsed_us();
        let mut result = match outcome {
            Ok(payload) => ToolResult::ok(payload),
            Err(f) => ToolResult::error(ProtocolError::execution(f.0)),
        };
        result.latency_us = latency_us;
        result
    }

    /// Validate-then-dispatch; protocol errors come back as error results.
    pub fn execute(&self, call: &ToolCall, ctx: &ToolContext<'_>) -> ToolResult {
        match self.validate(call) {
            Ok(v) => self.dispatch(&v, ctx),
            Err(e) => ToolResult::error(e),
        }
    }
}

fn check_value(spec: &ParamSpec, value: &Value) -> Result<Value, String> {
    match &spec.ty {
        ParamType::Text => match value.as_str() {
            Some(s) if !s.trim().is_empty() => Ok(value.clone()),
            Some(_) => Err("must not be empty".into()),
            None => Err("expected a string".into()),
        },
        ParamType::Integer { min, max } => {
            let n = match value {
                Value::Number(n) => n
                    .as_i64()
                    .or_else(|| n.as_f64().filter(|f| libm::trunc(*f) == *f && libm::fabs(*f) < 9.0e15).map(|f| f as i64)),
                _ => None,
            }
            .ok_or_else(|| String::from("expected an integer"))?;
            if let Some(m) = min {
                if n < *m {
                    return Err(format!("{n} is below the minimum {m}"));
                }
            }
            if let Some(m) = max {
                if n > *m {
                    return Err(format!("{n} is above the maximum {m}"));
                }
            }
            Ok(Value::from(n))
        }
        ParamType::Number => value
            .as_f64()
            .filter(|f| f.is_finite())
            .map(|_| value.clone())
            .ok_or_else(|| "expected a number".into()),
        ParamType::Boolean => value.as_bool().map(|_| value.clone()).ok_or_else(|| "expected a boolean".into()),
        ParamType::Enum { values } => {
            let s = value.as_str().ok_or_else(|| String::from("expected a string"))?;
            let wanted = normalize_label(s);
            values
                .iter()
                .find(|v| normalize_label(v) == wanted)
                .map(|v| Value::String(v.clone()))
                .ok_or_else(|| format!("'{s}' is not one of [{}]", values.join(", ")))
        }
    }
}

#[cfg(feature = "std")]
fn invoke(handler: &ToolHandler, call: &ValidatedCall, input: ToolInput<'_>) -> Result<Value, ToolFailure> {
    use std::panic::{catch_unwind, AssertUnwindSafe};
    match catch_unwind(AssertUnwindSafe(|| handler(call, input))) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "handler panicked".to_string());
            Err(ToolFailure(format!("handler panicked: {msg}")))
        }
    }
}

#[cfg(not(feature = "std"))]
fn invoke(handler: &ToolHandler, call: &ValidatedCall, input: ToolInput<'_>) -> Result<Value, ToolFailure> {
    handler(call, input)
}

struct Stopwatch {
    #[cfg(feature = "std")]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(feature = "std")]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_us(&self) -> u64 {
        #[cfg(feature = "std")]
        {
            self.start.elapsed().as_micros() as u64
        }
        #[cfg(not(feature = "std"))]
        {
            0
        }
    }
}
