//! TOML configuration with environment overrides.
//!
//! Every section is optional. A single `--seed` (or `seed = …`, or
//! `ECHOAGENT_SEED`) fans out to the simulator, benchmark and noise seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use echoagent_core::agent::DEFAULT_BUDGET;
use echoagent_core::guidelines::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use echoagent_core::sim::{DifficultyMix, SimConfig, Template};
use echoagent_core::tools::ToolFlags;

use crate::adapter::AdapterConfig;
use crate::remote::BackendConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{var}: {detail}")]
    Env { var: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Zero,
    #[default]
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSettings {
    pub templates: Vec<Template>,
    pub mix: DifficultyMix,
    pub seed: u64,
    pub budget: u32,
    /// Worker threads for case execution; 0 means one per core.
    pub parallelism: usize,
    pub noise: NoiseMode,
    pub noise_seed: u64,
    pub flags: ToolFlags,
    /// Attach tool metrics over the referenced studies to each report.
    pub metrics: bool,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            templates: Template::ALL.to_vec(),
            mix: DifficultyMix::default(),
            seed: 11,
            budget: DEFAULT_BUDGET,
            parallelism: 0,
            noise: NoiseMode::Calibrated,
            noise_seed: 5,
            flags: ToolFlags::FULL,
            metrics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JudgeConfig {
    #[default]
    Rule,
    Model { backend: BackendConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidelineSettings {
    /// A saved index file; takes precedence over `source`.
    pub index: Option<PathBuf>,
    /// A directory of `.txt`/`.md` guideline text to ingest at startup.
    pub source: Option<PathBuf>,
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for GuidelineSettings {
    fn default() -> Self {
        Self { index: None, source: None, chunk_size: DEFAULT_CHUNK_SIZE, overlap: DEFAULT_CHUNK_OVERLAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub bind: String,
    /// Dataset directory to serve; a fresh in-memory dataset is generated when unset.
    pub data_dir: Option<PathBuf>,
    /// Finished sessions are appended here as JSON lines.
    pub trace_log: Option<PathBuf>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), data_dir: None, trace_log: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: Option<u64>,
    pub sim: SimConfig,
    pub benchmark: BenchmarkSettings,
    pub backend: BackendConfig,
    pub judge: JudgeConfig,
    /// When set, the video tools call this service instead of the oracles.
    pub adapter: Option<AdapterConfig>,
    pub guidelines: GuidelineSettings,
    pub service: ServiceSettings,
}

impl AppConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: AppConfig = toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        if let Some(s) = cfg.seed {
            cfg.apply_seed(s);
        }
        Ok(cfg)
    }

    /// File (if any), then environment, then the explicit seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.into(), source })?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        if let Some(s) = seed {
            cfg.apply_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.sim.seed = seed;
        self.benchmark.seed = seed;
        self.benchmark.noise_seed = seed;
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(var: &'static str, v: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.trim().parse().map_err(|e: T::Err| ConfigError::Env { var, detail: e.to_string() })
        }
        if let Some(v) = get("ECHOAGENT_SEED") {
            self.apply_seed(num("ECHOAGENT_SEED", &v)?);
        }
        if let Some(v) = get("ECHOAGENT_BUDGET") {
            self.benchmark.budget = num("ECHOAGENT_BUDGET", &v)?;
        }
        if let Some(v) = get("ECHOAGENT_PARALLELISM") {
            self.benchmark.parallelism = num("ECHOAGENT_PARALLELISM", &v)?;
        }
        if let Some(v) = get("ECHOAGENT_BIND") {
            self.service.bind = v;
        }
        if let Some(v) = get("ECHOAGENT_ADAPTER_ENDPOINT") {
            match &mut self.adapter {
                Some(a) => a.endpoint = v,
                None => return Err(ConfigError::Env { var: "ECHOAGENT_ADAPTER_ENDPOINT", detail: "no [adapter] section to override".into() }),
            }
        }
        let endpoint = get("ECHOAGENT_ENDPOINT");
        let model = get("ECHOAGENT_MODEL");
        match &mut self.backend {
            BackendConfig::Remote { endpoint: e, model: m, .. } => {
                if let Some(v) = endpoint {
                    *e = v;
                }
                if let Some(v) = model {
                    *m = v;
                }
            }
            _ => {
                if let (Some(endpoint), Some(model)) = (endpoint, model) {
                    self.backend = BackendConfig::Remote {
                        endpoint,
                        model,
                        temperature: 0.0,
                        timeout_secs: 60,
                        retries: 2,
                        debug: false,
                    };
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backend.validate().map_err(ConfigError::Invalid)?;
        if let JudgeConfig::Model { backend } = &self.judge {
            backend.validate().map_err(|e| ConfigError::Invalid(format!("judge: {e}")))?;
        }
        if self.benchmark.budget == 0 {
            return Err(ConfigError::Invalid("benchmark.budget must be at least 1".into()));
        }
        if self.benchmark.templates.is_empty() {
            return Err(ConfigError::Invalid("benchmark.templates is empty".into()));
        }
        if self.guidelines.overlap >= self.guidelines.chunk_size {
            return Err(ConfigError::Invalid("guidelines.overlap must be below chunk_size".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn partial_file_keeps_defaults_and_seed_fans_out() {
        let cfg = AppConfig::from_toml("seed = 42\n[benchmark]\nbudget = 9\n", Path::new("t.toml")).unwrap();
        assert_eq!(cfg.benchmark.budget, 9);
        assert_eq!((cfg.sim.seed, cfg.benchmark.seed, cfg.benchmark.noise_seed), (42, 42, 42));
        assert_eq!(cfg.sim.studies, SimConfig::default().studies);
        assert_eq!(cfg.backend, BackendConfig::Optimal);
    }

    #[test]
    fn env_overrides() {
        let env: HashMap<&str, &str> = [
            ("ECHOAGENT_ENDPOINT", "http://llm:8000/v1"),
            ("ECHOAGENT_MODEL", "m"),
            ("ECHOAGENT_BUDGET", "7"),
            ("ECHOAGENT_BIND", "0.0.0.0:9000"),
        ]
        .into();
        let mut cfg = AppConfig::default();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert!(matches!(&cfg.backend, BackendConfig::Remote { model, .. } if model == "m"));
        assert_eq!(cfg.benchmark.budget, 7);
        assert_eq!(cfg.service.bind, "0.0.0.0:9000");
        let err = cfg.apply_env(|k| (k == "ECHOAGENT_SEED").then(|| "x".to_string()));
        assert!(matches!(err, Err(ConfigError::Env { var: "ECHOAGENT_SEED", .. })));
    }

    #[test]
    fn zero_budget_rejected() {
        let mut cfg = AppConfig::default();
        cfg.benchmark.budget = 0;
        assert!(cfg.validate().is_err());
    }
}
