//! Backends selected by configuration: an OpenAI-compatible chat client and
//! the scripted doubles.

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use echoagent_core::gateway::{Backend, BackendError, ChatMessage, DynBackend, Role, ScriptedBackend};
use echoagent_core::policy::OptimalPolicy;

pub const API_KEY_ENV: &str = "ECHOAGENT_API_KEY";

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        retries: u32,
        /// Log request and response bodies (with the key redacted).
        #[serde(default)]
        debug: bool,
    },
    /// The built-in scripted orchestrator for templated questions.
    Optimal,
    /// A script file: `{"steps": [...], "answer": "...", "name": "..."}`.
    Script { path: PathBuf },
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Optimal
    }
}

#[derive(Debug, Deserialize)]
struct ScriptFile {
    #[serde(default)]
    steps: Vec<String>,
    #[serde(default)]
    answer: String,
    #[serde(default)]
    name: Option<String>,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::Remote { endpoint, model, temperature, .. } => {
                if endpoint.trim().is_empty() || model.trim().is_empty() {
                    return Err("remote backend needs an endpoint and a model".into());
                }
                if !(0.0..=2.0).contains(temperature) {
                    return Err(format!("temperature {temperature} outside [0, 2]"));
                }
                Ok(())
            }
            Self::Optimal => Ok(()),
            Self::Script { path } if path.as_os_str().is_empty() => Err("scripted backend needs a script path".into()),
            Self::Script { .. } => Ok(()),
        }
    }

    pub fn build(&self) -> Result<DynBackend, String> {
        self.validate()?;
        Ok(match self {
            Self::Remote { endpoint, model, temperature, timeout_secs, retries, debug } => Box::new(RemoteBackend {
                endpoint: endpoint.clone(),
                model: model.clone(),
                temperature: *temperature,
                timeout: Duration::from_secs(*timeout_secs),
                retries: *retries,
                debug: *debug,
                api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
                backoff: Duration::from_millis(250),
            }),
            Self::Optimal => Box::new(OptimalPolicy),
            Self::Script { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let s: ScriptFile = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
                let b = ScriptedBackend::steps(s.steps, s.answer);
                Box::new(match s.name {
                    Some(n) => b.with_name(n),
                    None => b,
                })
            }
        })
    }
}

/// Chat-completions client. One request per attempt; a well-formed
/// completion is returned at once and never retried.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub retries: u32,
    pub debug: bool,
    pub api_key: Option<String>,
    pub backoff: Duration,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.0,
            timeout: Duration::from_secs(60),
            retries: 2,
            debug: false,
            api_key: None,
            backoff: Duration::from_millis(250),
        }
    }

    fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    pub fn request_body(&self, messages: &[ChatMessage]) -> Value {
        let msgs: Vec<Value> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        json!({"model": self.model, "temperature": self.temperature, "messages": msgs})
    }

    fn redact(&self, text: &str) -> String {
        match &self.api_key {
            Some(k) if !k.is_empty() => text.replace(k.as_str(), "[redacted]"),
            _ => text.to_string(),
        }
    }

    fn attempt(&self, agent: &ureq::Agent, body: &Value) -> Result<String, String> {
        let mut req = agent.post(&self.url()).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| format!("transport: {e}"))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| format!("reading body: {e}"))?;
        if self.debug {
            tracing::debug!(status, body = %self.redact(&text), "chat completion response");
        }
        if status != 200 {
            return Err(format!("HTTP {status}"));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| format!("bad JSON: {e}"))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        if messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = self.request_body(messages);
        if self.debug {
            tracing::debug!(url = %self.url(), body = %self.redact(&body.to_string()), "chat completion request");
        }
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.attempt(&agent, &body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "chat completion failed");
                    last = e;
                }
            }
            if attempt < self.retries {
                std::thread::sleep(self.backoff * (attempt + 1));
            }
        }
        Err(BackendError::Unavailable(format!("{} attempts failed; last: {last}", self.retries + 1)))
    }

    fn describe(&self) -> String {
        format!("remote:{}@{}:t={}", self.model, self.endpoint, self.temperature)
    }
}

/// Scripted backend that waits before each reply, for exercising live
/// steering against a session that is still running.
pub struct SlowBackend<B> {
    pub inner: B,
    pub delay: Duration,
}

impl<B: Backend> Backend for SlowBackend<B> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        std::thread::sleep(self.delay);
        self.inner.complete(messages)
    }

    fn describe(&self) -> String {
        format!("slow({}ms):{}", self.delay.as_millis(), self.inner.describe())
    }
}
