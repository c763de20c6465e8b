use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use echoagent::config::{AppConfig, NoiseMode};
use echoagent::runner::{
    ablate_parallel, agent_config, load_guidelines, run_benchmark_parallel, seed_map, tool_source, Backends, BenchEnv,
    Workspace,
};
use echoagent::service::{router, ServiceInputs, ServiceState};
use echoagent::store;
use echoagent_core::agent::{Session, SessionEnv};
use echoagent_core::bench::{ablation_table, accuracy_table, evaluate_tools, metrics_table, report_json};

#[derive(Parser)]
#[command(name = "echoagent", version, about = "Echocardiography reasoning agent")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "ECHOAGENT_CONFIG")]
    config: Option<PathBuf>,
    /// Seeds the simulator, the benchmark sampler and the tool noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one question against one study and print the trace.
    Query(QueryArgs),
    /// Benchmark runs.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Write a simulated dataset and its benchmark file.
    Generate(GenerateArgs),
    /// Build a guideline index file from a directory of text.
    Ingest(IngestArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory from `generate`; simulated in memory when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Exact oracles instead of calibrated noise.
    #[arg(long)]
    zero_noise: bool,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    study: String,
    #[arg(long)]
    question: String,
    #[arg(long)]
    budget: Option<u32>,
    /// Print the trace as JSON lines instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run the benchmark once with the configured tools.
    Run(BenchArgs),
    /// Run the four tool configurations.
    Ablate(BenchArgs),
    /// Score the tools alone against ground truth.
    Metrics(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Write the structured report(s) here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    studies: Option<usize>,
    /// Also write synthetic pixel payloads.
    #[arg(long)]
    pixels: bool,
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of .txt and .md guideline files.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    bind: Option<String>,
}

type Fallible<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Fallible<()> {
    let mut cfg = AppConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Query(a) => query(&mut cfg, a),
        Command::Bench(b) => bench(&mut cfg, b),
        Command::Generate(a) => {
            if let Some(n) = a.studies {
                cfg.sim.studies = n;
            }
            cfg.sim.pixels |= a.pixels;
            let ws = Workspace::generate_to(&cfg, &a.out)?;
            for w in &ws.warnings {
                tracing::warn!("{w}");
            }
            println!("wrote {} studies and {} cases to {}", ws.studies.len(), ws.cases.len(), a.out.display());
            Ok(())
        }
        Command::Ingest(a) => {
            let idx = store::ingest(&a.source, cfg.guidelines.chunk_size, cfg.guidelines.overlap)?;
            store::save_index(&a.out, &idx)?;
            println!("indexed {} passages into {}", idx.passage_count(), a.out.display());
            Ok(())
        }
        Command::Serve(a) => serve(&mut cfg, a),
    }
}

fn apply_data(cfg: &mut AppConfig, data: &DataArgs) {
    if let Some(d) = &data.data {
        cfg.service.data_dir = Some(d.clone());
    }
    if data.zero_noise {
        cfg.benchmark.noise = NoiseMode::Zero;
    }
}

fn query(cfg: &mut AppConfig, a: QueryArgs) -> Fallible<()> {
    apply_data(cfg, &a.data);
    let ws = Workspace::from_config(cfg)?;
    let study = ws.studies.get(&a.study).ok_or_else(|| format!("unknown study {}", a.study))?;
    let guidelines = load_guidelines(&cfg.guidelines)?;
    let backends = Backends::build(cfg)?;
    let agent = agent_config(cfg, &ws.study_list());
    let registry = tool_source(cfg, &ws).registry(&agent.noise, agent.flags);
    let env = SessionEnv { study, guidelines: Some(&guidelines), registry: &registry, backend: backends.agent.as_ref() };
    let mut session = Session::new("cli", a.question, a.budget.unwrap_or(agent.budget), env)?;
    let result = session.run_observed(&mut |e| {
        if a.json {
            println!("{}", serde_json::to_string(e).unwrap_or_default());
        } else {
            println!("[{:>3}] {:<15} {}", e.seq, e.kind.as_str(), e.payload);
        }
        echoagent_core::agent::Control::Continue
    });
    let state = match result {
        Ok(s) => s.clone(),
        Err(e) => return Err(e.into()),
    };
    if let Some(answer) = &state.answer {
        println!("\n{}", answer.text);
        if !answer.is_grounded() {
            eprintln!("warning: {} stated value(s) not found in any observation", answer.ungrounded.len());
        }
    }
    Ok(())
}

fn write_out(path: Option<&Path>, body: &str) -> Fallible<()> {
    if let Some(p) = path {
        std::fs::write(p, body)?;
        eprintln!("report written to {}", p.display());
    }
    Ok(())
}

fn bench(cfg: &mut AppConfig, cmd: BenchCommand) -> Fallible<()> {
    let (args, mode) = match &cmd {
        BenchCommand::Run(a) => (a, 0),
        BenchCommand::Ablate(a) => (a, 1),
        BenchCommand::Metrics(a) => (a, 2),
    };
    apply_data(cfg, &args.data);
    if let Some(p) = args.parallelism {
        cfg.benchmark.parallelism = p;
    }
    let ws = Workspace::from_config(cfg)?;
    let agent = agent_config(cfg, &ws.study_list());
    if mode == 2 {
        let m = evaluate_tools(&ws.study_list(), &agent.noise)?;
        println!("{}", metrics_table(&m));
        return write_out(args.out.as_deref(), &serde_json::to_string_pretty(&m)?);
    }
    if ws.cases.is_empty() {
        return Err("no benchmark cases (generate a dataset with `echoagent generate`)".into());
    }
    let guidelines = load_guidelines(&cfg.guidelines)?;
    let backends = Backends::build(cfg)?;
    let judge = backends.judge();
    let tools = tool_source(cfg, &ws);
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
    if mode == 0 {
        let r = run_benchmark_parallel(&ws.cases, &env, &agent)?;
        println!("{}", accuracy_table(&[(backends.agent.describe().as_str(), &r)]));
        if let Some(m) = &r.tool_metrics {
            println!("{}", metrics_table(m));
        }
        write_out(args.out.as_deref(), &report_json(&r))
    } else {
        let rows = ablate_parallel(&ws.cases, &env, &agent)?;
        println!("{}", ablation_table(&rows));
        let body = format!("[{}]", rows.iter().map(report_json).collect::<Vec<_>>().join(","));
        write_out(args.out.as_deref(), &body)
    }
}

fn serve(cfg: &mut AppConfig, a: ServeArgs) -> Fallible<()> {
    apply_data(cfg, &a.data);
    if let Some(b) = a.bind {
        cfg.service.bind = b;
    }
    let ws = Workspace::from_config(cfg)?;
    let guidelines = load_guidelines(&cfg.guidelines)?;
    let Backends { agent: backend, judge } = Backends::build(cfg)?;
    let agent = agent_config(cfg, &ws.study_list());
    let tools = tool_source(cfg, &ws);
    let state = ServiceState::new(ServiceInputs {
        studies: ws.studies,
        pixel_dir: ws.pixel_dir,
        guidelines,
        backend: Arc::from(backend),
        judge_backend: judge.map(Arc::from),
        tools,
        noise: agent.noise,
        budget: agent.budget,
        flags: agent.flags,
        cases: ws.cases,
        parallelism: cfg.benchmark.parallelism,
        seeds: seed_map(cfg),
        trace_log: cfg.service.trace_log.clone(),
    });
    let bind = cfg.service.bind.clone();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok::<_, Box<dyn std::error::Error>>(())
    })
}
