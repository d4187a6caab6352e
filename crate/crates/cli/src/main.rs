//! `stepforge`: build retrieval indexes, run single tasks, sweep benchmark
//! suites and serve live runs over HTTP.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stepforge_core::analysis::LabelMode;
use stepforge_core::harness::{
    convert_multi_to_single, emit_report, evaluate_multi_turn, evaluate_single_turn, run_task, EditScript, EvalOptions, MultiTurnMode,
    PrConvention, RagMode, ReportFormat, Solver,
};
use stepforge_core::llm::{HttpProvider, HttpProviderConfig, LlmProvider};
use stepforge_core::model::{parse_suite_with, LoadOptions};
use stepforge_core::refine::Deps;
use stepforge_core::retriever::{ingest, parse_corpus, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};
use stepforge_core::run::FileSink;
use stepforge_core::{AgentConfig, Embedder, EmbeddingIndex, LlmGateway, RunnerConfig, ScriptedProvider, TaskKind, TaskSpec};

#[derive(Parser)]
#[command(name = "stepforge", version, about = "Execution-checked, search-guided code generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a documentation corpus into a retrieval index.
    Ingest(IngestArgs),
    /// Solve one task of a suite.
    Run(RunArgs),
    /// Evaluate a whole suite and print the metrics report.
    Bench(BenchArgs),
    /// Serve the run API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    Hashing,
    Http,
}

#[derive(Args)]
struct EmbedArgs {
    /// Embedding endpoint for an `http` embedder or an index built by one.
    #[arg(long)]
    embed_url: Option<String>,
    #[arg(long, env = "STEPFORGE_EMBED_TOKEN", hide_env_values = true)]
    embed_token: Option<String>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbedderKind::Hashing)]
    embedder: EmbedderKind,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Provider name recorded in the index for an `http` embedder.
    #[arg(long, default_value = "http")]
    embed_name: String,
    #[command(flatten)]
    embed: EmbedArgs,
}

#[derive(Args)]
struct LlmArgs {
    /// Scripted completions file (`{"entries": [...]}`).
    #[arg(long, conflicts_with = "llm_url", required_unless_present = "llm_url")]
    script: Option<PathBuf>,
    /// Completion endpoint.
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long, env = "STEPFORGE_LLM_TOKEN", hide_env_values = true)]
    llm_token: Option<String>,
    #[arg(long, default_value = "http")]
    llm_name: String,
}

#[derive(Args)]
struct SandboxArgs {
    /// Python interpreter for the kernel shim.
    #[arg(long, default_value = "python3", env = "STEPFORGE_PYTHON")]
    python: String,
    /// Kernel shim script; the bundled one is used when absent.
    #[arg(long)]
    runner: Option<PathBuf>,
}

#[derive(Args, Default)]
struct CfgArgs {
    /// JSON agent configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    k_top: Option<usize>,
    #[arg(long)]
    k_retrieve: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    max_attempts: Option<u32>,
    #[arg(long)]
    c_base: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    lookahead_steps: Option<usize>,
    #[arg(long)]
    cell_timeout_ms: Option<u64>,
    #[arg(long)]
    context_window: Option<usize>,
    #[arg(long)]
    query_includes_prior_code: Option<bool>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RagArg {
    At0,
    At3,
}

impl From<RagArg> for RagMode {
    fn from(r: RagArg) -> Self {
        match r {
            RagArg::At0 => RagMode::At0,
            RagArg::At3 => RagMode::At3,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Auto,
    HumanScripted,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    mode: ModeArg,
    /// Recorded human edits, required for `human-scripted`.
    #[arg(long, required_if_eq("mode", "human-scripted"))]
    edits: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RagArg::At0)]
    rag: RagArg,
    /// Retrieval index built by `ingest`.
    #[arg(long, required_if_eq("rag", "at3"))]
    index: Option<PathBuf>,
    /// Directory for program.json, tree.json and events.jsonl.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
    #[command(flatten)]
    sandbox: SandboxArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    cfg: CfgArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TurnsArg {
    Single,
    Multi,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LabelArg {
    Dotted,
    Bare,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Agent,
    LlmOnly,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    suite: PathBuf,
    #[arg(long, value_enum, default_value_t = RagArg::At0)]
    rag: RagArg,
    #[arg(long, required_if_eq("rag", "at3"))]
    index: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    mode: ModeArg,
    #[arg(long, required_if_eq("mode", "human-scripted"))]
    edits: Option<PathBuf>,
    /// Which evaluations to run; defaults to single for auto, multi for human-scripted.
    #[arg(long, value_enum)]
    turns: Option<TurnsArg>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = LabelArg::Dotted)]
    label_mode: LabelArg,
    /// Recall over |Y| and precision over |Z| instead of the printed definitions.
    #[arg(long)]
    conventional_pr: bool,
    #[arg(long, value_enum, default_value_t = SolverArg::Agent)]
    solver: SolverArg,
    /// Directory for the structured and table reports; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
    #[command(flatten)]
    sandbox: SandboxArgs,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(flatten)]
    cfg: CfgArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, default_value = "runs")]
    data_dir: PathBuf,
    /// Retrieval index used for every run.
    #[arg(long)]
    index: Option<PathBuf>,
    #[command(flatten)]
    llm: LlmArgs,
    #[command(flatten)]
    sandbox: SandboxArgs,
    #[command(flatten)]
    embed: EmbedArgs,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let docs = parse_corpus(&text)?;
    let embedder: Box<dyn Embedder> = match a.embedder {
        EmbedderKind::Hashing => {
            if a.dim == 0 {
                bail!("--dim must be positive");
            }
            Box::new(HashingEmbedder::new(a.dim))
        }
        EmbedderKind::Http => {
            let url = a.embed.embed_url.context("--embed-url is required for the http embedder")?;
            Box::new(HttpEmbedder::new(HttpEmbedderConfig {
                name: a.embed_name,
                url,
                dim: a.dim,
                bearer_token: a.embed.embed_token,
                timeout_ms: 30_000,
            })?)
        }
    };
    let index = ingest(docs, embedder.as_ref())?;
    write_file(&a.out, index.to_json().as_bytes())?;
    println!("docs = {}  dim = {}", index.len(), index.provider().dim);
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let suite = load_suite(&a.suite)?;
    let Some(task) = suite.into_iter().find(|t| t.id == a.task) else {
        bail!("no task `{}` in {}", a.task, a.suite.display());
    };
    let mut cfg = a.cfg.resolve()?;
    let rag: RagMode = a.rag.into();
    let keep = tempfile::tempdir()?;
    let mut deps = build_deps(&a.llm, &a.sandbox, &cfg, keep.path())?;
    if rag == RagMode::At3 {
        let index = a.index.as_deref().context("--index is required with --rag at3")?;
        attach_index(&mut deps, index, &a.embed)?;
        cfg.k_retrieve = rag.retrieval_k();
    }
    let script = a.edits.as_deref().map(EditScript::load).transpose()?;
    let mode = match (&a.mode, &script) {
        (ModeArg::HumanScripted, Some(s)) => MultiTurnMode::HumanScripted(s),
        _ => MultiTurnMode::Auto,
    };
    fs::create_dir_all(&a.out)?;
    let sink = FileSink::append(&a.out.join("events.jsonl"))?;
    let state = run_task(&task, &cfg, Arc::new(deps), mode, Box::new(sink))?;
    let program = state.program();
    write_file(&a.out.join("program.json"), &serde_json::to_vec_pretty(&program)?)?;
    write_file(&a.out.join("tree.json"), state.tree.dump().as_bytes())?;
    println!(
        "task = {}  status = {:?}  complete@1 = {:.3}",
        task.id,
        state.status,
        program.complete_rate()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let suite = load_suite(&a.suite)?;
    let cfg = a.cfg.resolve()?;
    let keep = tempfile::tempdir()?;
    let mut deps = build_deps(&a.llm, &a.sandbox, &cfg, keep.path())?;
    if let Some(index) = &a.index {
        attach_index(&mut deps, index, &a.embed)?;
    }
    let turns = a.turns.unwrap_or(match a.mode {
        ModeArg::Auto => TurnsArg::Single,
        ModeArg::HumanScripted => TurnsArg::Multi,
    });
    if a.mode == ModeArg::HumanScripted && turns != TurnsArg::Multi {
        bail!("--mode human-scripted only applies to the multi-turn evaluation");
    }
    let opts = EvalOptions {
        rag: a.rag.into(),
        label_mode: match a.label_mode {
            LabelArg::Dotted => LabelMode::Dotted,
            LabelArg::Bare => LabelMode::Bare,
        },
        pr: if a.conventional_pr {
            PrConvention::Conventional
        } else {
            PrConvention::AsPrinted
        },
        jobs: a.jobs.max(1),
        solver: match a.solver {
            SolverArg::Agent => Solver::Agent,
            SolverArg::LlmOnly => Solver::LlmOnly,
        },
    };
    let script = a.edits.as_deref().map(EditScript::load).transpose()?;
    let mut reports = Vec::new();
    if matches!(turns, TurnsArg::Single | TurnsArg::Both) {
        // multi-step tasks enter the single-turn sweep one step at a time
        let mut singles = Vec::new();
        for t in &suite {
            match t.kind {
                TaskKind::SingleTurn if t.steps.len() == 1 => singles.push(t.clone()),
                _ => singles.extend(convert_multi_to_single(t)?),
            }
        }
        reports.push(("single", evaluate_single_turn(&singles, &deps, &cfg, &opts)?));
    }
    if matches!(turns, TurnsArg::Multi | TurnsArg::Both) {
        let mode = match &script {
            Some(s) if a.mode == ModeArg::HumanScripted => MultiTurnMode::HumanScripted(s),
            _ => MultiTurnMode::Auto,
        };
        reports.push(("multi", evaluate_multi_turn(&suite, &deps, &cfg, mode, &opts)?));
    }
    let mut errors = 0;
    for (name, report) in &reports {
        errors += report.infrastructure_errors();
        let structured = emit_report(report, ReportFormat::Structured);
        let table = emit_report(report, ReportFormat::Table);
        match &a.out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                write_file(&dir.join(format!("report-{name}.json")), &structured)?;
                write_file(&dir.join(format!("report-{name}.txt")), &table)?;
            }
            None => print!("{}", String::from_utf8_lossy(&structured)),
        }
        println!("[{name}-turn]");
        print!("{}", String::from_utf8_lossy(&table));
    }
    for (_, report) in &reports {
        for (id, t) in &report.per_task {
            if let Some(e) = &t.error {
                eprintln!("task {id}: {e}");
            }
        }
    }
    Ok(if errors == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    let keep = tempfile::tempdir()?;
    let mut deps = build_deps(&a.llm, &a.sandbox, &AgentConfig::default(), keep.path())?;
    if let Some(index) = &a.index {
        attach_index(&mut deps, index, &a.embed)?;
    }
    let registry = stepforge_service::open_registry(&a.data_dir, Arc::new(deps))
        .with_context(|| format!("opening {}", a.data_dir.display()))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        eprintln!("listening on {}", listener.local_addr()?);
        stepforge_service::serve(listener, registry, shutdown_signal()).await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}

impl CfgArgs {
    fn resolve(&self) -> Result<AgentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de).with_context(|| format!("parsing {}", path.display()))?
            }
            None => AgentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$target = v; })*
            };
        }
        set!(
            temperature => temperature,
            top_p => top_p,
            max_tokens => max_tokens,
            k_top => k_top,
            k_retrieve => k_retrieve,
            n_samples => n_samples,
            max_attempts => max_attempts,
            c_base => c_base,
            c => c,
            cell_timeout_ms => cell_timeout_ms,
            context_window => context_window_tokens,
            query_includes_prior_code => query_includes_prior_code,
        );
        if let Some(n) = self.lookahead_steps {
            cfg.lookahead_steps = Some(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_suite(path: &Path) -> Result<Vec<TaskSpec>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_suite_with(&bytes, LoadOptions { derive_gold_labels: true })?)
}

fn build_deps(llm: &LlmArgs, sandbox: &SandboxArgs, cfg: &AgentConfig, scratch: &Path) -> Result<Deps> {
    let provider: Arc<dyn LlmProvider> = match (&llm.script, &llm.llm_url) {
        (Some(path), _) => Arc::new(ScriptedProvider::from_path(path)?),
        (None, Some(url)) => Arc::new(HttpProvider::new(HttpProviderConfig {
            name: llm.llm_name.clone(),
            url: url.clone(),
            bearer_token: llm.llm_token.clone(),
            timeout_ms: 120_000,
        })?),
        (None, None) => bail!("one of --script or --llm-url is required"),
    };
    let runner = match &sandbox.runner {
        Some(shim) => RunnerConfig::python_shim(&sandbox.python, shim),
        None => RunnerConfig::bundled(&sandbox.python, scratch)?,
    };
    Ok(Deps::new(
        LlmGateway::new(provider, cfg.context_window_tokens),
        Arc::new(runner),
    ))
}

/// Loads an index and reconstructs the embedder it was built with.
fn attach_index(deps: &mut Deps, path: &Path, embed: &EmbedArgs) -> Result<()> {
    let index = EmbeddingIndex::load(path)?;
    let info = index.provider().clone();
    let embedder: Arc<dyn Embedder> = match info.name.strip_prefix("hashing-").and_then(|d| d.parse().ok()) {
        Some(dim) if dim == info.dim && dim > 0 => Arc::new(HashingEmbedder::new(dim)),
        _ => {
            let url = embed
                .embed_url
                .clone()
                .with_context(|| format!("index was built by `{}`; pass --embed-url", info.name))?;
            Arc::new(HttpEmbedder::new(HttpEmbedderConfig {
                name: info.name.clone(),
                url,
                dim: info.dim,
                bearer_token: embed.embed_token.clone(),
                timeout_ms: 30_000,
            })?)
        }
    };
    *deps = deps.clone().with_retrieval(Arc::new(index), embedder);
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
