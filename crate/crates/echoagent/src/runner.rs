//! Parallel benchmark execution and the generate → bench → ablate pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use echoagent_core::bench::{
    assemble_report, evaluate_tools, run_case, AgentConfig, Judge, MetricsError, RunConfig, RunReport, ToolMetrics,
};
use echoagent_core::domain::{EchoStudy, FeasibilityVector};
use echoagent_core::gateway::{Backend, DynBackend};
use echoagent_core::guidelines::{reference_index, GuidelineIndex};
use echoagent_core::protocol::ToolRegistry;
use echoagent_core::sim::{generate_benchmark, generate_study, BenchmarkCase, GroundTruth, SimConfig, SimError};
use echoagent_core::tools::{oracle_registry, ToolFlags};
use echoagent_core::vision::{phase_frame_labels, NoiseProfile};

use crate::adapter::{adapter_registry, AdapterConfig};
use crate::config::{AppConfig, GuidelineSettings, JudgeConfig, NoiseMode};
use crate::store::{self, StoreError};

pub const BENCHMARK_FILE: &str = "benchmark.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{0}")]
    Config(String),
}

/// Oracle noise for a run. Calibrated flip rates are solved against the
/// labels of the phase frames of `studies`.
pub fn noise_profile(mode: NoiseMode, seed: u64, studies: &[EchoStudy]) -> NoiseProfile {
    match mode {
        NoiseMode::Zero => NoiseProfile::zero(seed),
        NoiseMode::Calibrated => {
            let split: Vec<FeasibilityVector> =
                studies.iter().flat_map(|s| phase_frame_labels(s).into_iter().map(|(_, y)| y)).collect();
            NoiseProfile::calibrated(seed, &split)
        }
    }
}

/// Where the video tools come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ToolSource {
    Oracle,
    Adapter(AdapterConfig),
}

impl ToolSource {
    pub fn registry(&self, noise: &NoiseProfile, flags: ToolFlags) -> ToolRegistry {
        match self {
            Self::Oracle => oracle_registry(noise, flags),
            Self::Adapter(cfg) => adapter_registry(cfg.clone(), flags),
        }
    }
}

/// Shared inputs for a batch of runs.
pub struct BenchEnv<'a> {
    pub studies: &'a BTreeMap<String, EchoStudy>,
    pub guidelines: Option<&'a GuidelineIndex>,
    pub backend: &'a dyn Backend,
    pub judge: &'a Judge<'a>,
    pub tools: &'a ToolSource,
    /// Worker threads; 0 means one per core.
    pub parallelism: usize,
    pub seeds: BTreeMap<String, u64>,
    /// Attach oracle tool metrics over the studies the cases reference.
    pub metrics: bool,
}

/// Tool metrics over the distinct studies referenced by `cases`, in id order.
pub fn referenced_metrics(
    cases: &[BenchmarkCase],
    studies: &BTreeMap<String, EchoStudy>,
    noise: &NoiseProfile,
) -> Result<ToolMetrics, MetricsError> {
    let mut ids: Vec<&str> = cases.iter().map(|c| c.study_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let picked: Vec<EchoStudy> = ids.iter().filter_map(|id| studies.get(*id).cloned()).collect();
    evaluate_tools(&picked, noise)
}

/// Runs every case in its own session on a pool of `parallelism` threads.
/// The report is ordered by case id whatever the completion order.
pub fn run_benchmark_parallel(cases: &[BenchmarkCase], env: &BenchEnv<'_>, agent: &AgentConfig) -> Result<RunReport, RunnerError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(env.parallelism).build()?;
    let registry = env.tools.registry(&agent.noise, agent.flags);
    let records = pool.install(|| {
        cases
            .par_iter()
            .map(|c| run_case(c, env.studies.get(&c.study_id), env.guidelines, &registry, env.backend, env.judge, agent.budget))
            .collect()
    });
    let metrics = match (&env.tools, env.metrics) {
        (ToolSource::Oracle, true) if !cases.is_empty() => Some(referenced_metrics(cases, env.studies, &agent.noise)?),
        _ => None,
    };
    Ok(assemble_report(RunConfig::new(agent, env.backend, env.judge, env.seeds.clone()), records, metrics))
}

/// The four ablation rows in table order.
pub fn ablate_parallel(cases: &[BenchmarkCase], env: &BenchEnv<'_>, agent: &AgentConfig) -> Result<Vec<RunReport>, RunnerError> {
    ToolFlags::GRID
        .iter()
        .map(|flags| run_benchmark_parallel(cases, env, &AgentConfig { flags: *flags, ..agent.clone() }))
        .collect()
}

/// Studies generated in parallel; output order follows the study index.
pub fn generate_parallel(config: &SimConfig) -> Result<Vec<(EchoStudy, GroundTruth)>, SimError> {
    config.validate()?;
    (0..config.studies as u64).into_par_iter().map(|i| generate_study(config, i)).collect()
}

/// Everything a benchmark run reads.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub studies: BTreeMap<String, EchoStudy>,
    pub cases: Vec<BenchmarkCase>,
    pub warnings: Vec<String>,
    /// Directory the pixel paths of the studies are relative to, if on disk.
    pub pixel_dir: Option<PathBuf>,
}

impl Workspace {
    /// Simulated in memory from the configuration.
    pub fn generate(cfg: &AppConfig) -> Result<Self, RunnerError> {
        let data = generate_parallel(&cfg.sim)?;
        let set = generate_benchmark(&data, &cfg.benchmark.templates, cfg.benchmark.mix, cfg.benchmark.seed);
        Ok(Self {
            studies: data.into_iter().map(|(s, _)| (s.study_id.clone(), s)).collect(),
            cases: set.cases,
            warnings: set.warnings,
            pixel_dir: None,
        })
    }

    /// Writes the dataset and its benchmark file under `dir`.
    pub fn generate_to(cfg: &AppConfig, dir: &Path) -> Result<Self, RunnerError> {
        let data = generate_parallel(&cfg.sim)?;
        store::write_dataset(dir, &cfg.sim, &data)?;
        let set = generate_benchmark(&data, &cfg.benchmark.templates, cfg.benchmark.mix, cfg.benchmark.seed);
        store::write_benchmark(&dir.join(BENCHMARK_FILE), &set.cases)?;
        Ok(Self {
            studies: data.into_iter().map(|(s, _)| (s.study_id.clone(), s)).collect(),
            cases: set.cases,
            warnings: set.warnings,
            pixel_dir: Some(dir.join(store::STUDY_DIR)),
        })
    }

    /// Reads a directory written by [`Workspace::generate_to`]. A missing
    /// benchmark file leaves the case list empty.
    pub fn load(dir: &Path) -> Result<Self, RunnerError> {
        let studies = store::read_dataset(dir)?;
        let bench = dir.join(BENCHMARK_FILE);
        let cases = if bench.exists() { store::read_benchmark(&bench)? } else { Vec::new() };
        Ok(Self {
            studies: studies.into_iter().map(|s| (s.study_id.clone(), s)).collect(),
            cases,
            warnings: Vec::new(),
            pixel_dir: Some(dir.join(store::STUDY_DIR)),
        })
    }

    pub fn from_config(cfg: &AppConfig) -> Result<Self, RunnerError> {
        match &cfg.service.data_dir {
            Some(d) => Self::load(d),
            None => Self::generate(cfg),
        }
    }

    pub fn study_list(&self) -> Vec<EchoStudy> {
        self.studies.values().cloned().collect()
    }
}

pub fn load_guidelines(settings: &GuidelineSettings) -> Result<GuidelineIndex, RunnerError> {
    Ok(match (&settings.index, &settings.source) {
        (Some(path), _) => store::load_index(path)?,
        (None, Some(dir)) => store::ingest(dir, settings.chunk_size, settings.overlap)?,
        (None, None) => reference_index(),
    })
}

/// The seeds recorded in a report fingerprint.
pub fn seed_map(cfg: &AppConfig) -> BTreeMap<String, u64> {
    [("benchmark", cfg.benchmark.seed), ("noise", cfg.benchmark.noise_seed), ("sim", cfg.sim.seed)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

pub fn agent_config(cfg: &AppConfig, studies: &[EchoStudy]) -> AgentConfig {
    AgentConfig {
        budget: cfg.benchmark.budget,
        flags: cfg.benchmark.flags,
        noise: noise_profile(cfg.benchmark.noise, cfg.benchmark.noise_seed, studies),
    }
}

pub fn tool_source(cfg: &AppConfig, ws: &Workspace) -> ToolSource {
    match &cfg.adapter {
        Some(a) => {
            let mut a = a.clone();
            if a.pixel_dir.as_os_str().is_empty() {
                if let Some(d) = &ws.pixel_dir {
                    a.pixel_dir = d.clone();
                }
            }
            ToolSource::Adapter(a)
        }
        None => ToolSource::Oracle,
    }
}

/// Backends a run needs, built once. The judge borrows the second one.
pub struct Backends {
    pub agent: DynBackend,
    pub judge: Option<DynBackend>,
}

impl Backends {
    pub fn build(cfg: &AppConfig) -> Result<Self, RunnerError> {
        let agent = cfg.backend.build().map_err(RunnerError::Config)?;
        let judge = match &cfg.judge {
            JudgeConfig::Rule => None,
            JudgeConfig::Model { backend } => Some(backend.build().map_err(|e| RunnerError::Config(format!("judge: {e}")))?),
        };
        Ok(Self { agent, judge })
    }

    pub fn judge(&self) -> Judge<'_> {
        match &self.judge {
            Some(b) => Judge::Model(b.as_ref()),
            None => Judge::Rule,
        }
    }
}

/// Output of one full pipeline pass.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub run: RunReport,
    pub ablation: Vec<RunReport>,
}

/// Generate → bench → ablate with the configured backend and judge.
pub fn run_pipeline(cfg: &AppConfig) -> Result<PipelineOutput, RunnerError> {
    let ws = Workspace::generate(cfg)?;
    let guidelines = load_guidelines(&cfg.guidelines)?;
    let backends = Backends::build(cfg)?;
    let judge = backends.judge();
    let tools = tool_source(cfg, &ws);
    let agent = agent_config(cfg, &ws.study_list());
    let env = BenchEnv {
        studies: &ws.studies,
        guidelines: Some(&guidelines),
        backend: backends.agent.as_ref(),
        judge: &judge,
        tools: &tools,
        parallelism: cfg.benchmark.parallelism,
        seeds: seed_map(cfg),
        metrics: cfg.benchmark.metrics,
    };
    let run = run_benchmark_parallel(&ws.cases, &env, &agent)?;
    let ablation = ablate_parallel(&ws.cases, &env, &agent)?;
    Ok(PipelineOutput { run, ablation })
}
