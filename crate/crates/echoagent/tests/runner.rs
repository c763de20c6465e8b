use std::collections::BTreeMap;

use echoagent::config::{AppConfig, NoiseMode};
use echoagent::runner::{
    ablate_parallel, agent_config, generate_parallel, run_benchmark_parallel, seed_map, BenchEnv, ToolSource, Workspace,
};
use echoagent_core::bench::{report_json, run_benchmark, Judge};
use echoagent_core::guidelines::reference_index;
use echoagent_core::policy::OptimalPolicy;
use echoagent_core::sim::{generate_dataset, SimConfig};

fn small() -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.sim.studies = 12;
    cfg.apply_seed(21);
    cfg
}

#[test]
fn parallel_generation_matches_sequential() {
    let cfg = SimConfig { studies: 9, ..SimConfig::default() };
    assert_eq!(generate_parallel(&cfg).unwrap(), generate_dataset(&cfg).unwrap());
}

#[test]
fn parallel_run_matches_sequential_runner() {
    let cfg = small();
    let ws = Workspace::generate(&cfg).unwrap();
    let g = reference_index();
    let agent = agent_config(&cfg, &ws.study_list());
    let seq = run_benchmark(&ws.cases, &ws.studies, Some(&g), &OptimalPolicy, &agent, &Judge::Rule, seed_map(&cfg));
    for threads in [1, 4] {
        let env = BenchEnv {
            studies: &ws.studies,
            guidelines: Some(&g),
            backend: &OptimalPolicy,
            judge: &Judge::Rule,
            tools: &ToolSource::Oracle,
            parallelism: threads,
            seeds: seed_map(&cfg),
            metrics: false,
        };
        let par = run_benchmark_parallel(&ws.cases, &env, &agent).unwrap();
        assert_eq!(report_json(&par), report_json(&seq), "parallelism {threads}");
    }
}

#[test]
fn metrics_attach_for_oracle_runs_and_ablation_has_four_rows() {
    let mut cfg = small();
    cfg.benchmark.noise = NoiseMode::Zero;
    let ws = Workspace::generate(&cfg).unwrap();
    let g = reference_index();
    let agent = agent_config(&cfg, &ws.study_list());
    let env = BenchEnv {
        studies: &ws.studies,
        guidelines: Some(&g),
        backend: &OptimalPolicy,
        judge: &Judge::Rule,
        tools: &ToolSource::Oracle,
        parallelism: 2,
        seeds: BTreeMap::new(),
        metrics: true,
    };
    let r = run_benchmark_parallel(&ws.cases, &env, &agent).unwrap();
    assert_eq!(r.accuracy, Some(1.0));
    let m = r.tool_metrics.expect("metrics attached");
    assert_eq!(m.feasibility.micro.f1, 1.0);
    let rows = ablate_parallel(&ws.cases, &env, &agent).unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn dataset_on_disk_round_trips_into_a_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let written = Workspace::generate_to(&cfg, dir.path()).unwrap();
    let loaded = Workspace::load(dir.path()).unwrap();
    assert_eq!(loaded.studies, written.studies);
    assert_eq!(loaded.cases, written.cases);
    assert_eq!(loaded.pixel_dir, Some(dir.path().join("studies")));
}

#[test]
fn seed_changes_the_benchmark() {
    let a = Workspace::generate(&small()).unwrap();
    let mut cfg = small();
    cfg.apply_seed(22);
    let b = Workspace::generate(&cfg).unwrap();
    assert_ne!(a.cases, b.cases);
}
