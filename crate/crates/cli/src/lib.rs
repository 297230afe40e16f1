//! Command-line driver: run an agent on a kitchen scenario, replay a trace,
//! summarise traces.
//!
//! Exit status: 0 when the task was solved (or the replay is clean), 1 when
//! a run fails or a replay diverges, 2 for usage and configuration errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use recap_core::engine::{run, RunConfig, RunResult};
use recap_core::kitchen::{KitchenEnv, BUILTIN_SCENARIOS};
use recap_core::llm::{ChatBackend, HttpChatBackend, ScriptedBackend, API_BASE_ENV, API_KEY_ENV};
use recap_core::prompts::VariantMode;
use recap_core::trace::{self, Recorder, Trace, TraceHeader};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Per-1k-token prices used by `stats` unless overridden.
pub const DEFAULT_PRICE_IN: f64 = 0.0025;
pub const DEFAULT_PRICE_OUT: f64 = 0.01;

#[derive(Debug, Parser)]
#[command(name = "recap", version, about = "Recursive plan-ahead agent for text environments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the agent once on a scenario.
    Run(RunArgs),
    /// Re-execute a trace against a fresh environment and check it.
    Replay {
        trace: PathBuf,
    },
    /// Print per-trace and mean tree, call, step and cost figures.
    Stats(StatsArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Built-in scenario: sandwich, blocked_board or cook_patty.
    #[arg(long)]
    pub scenario: Option<String>,
    /// `live` or `scripted:PATH`.
    #[arg(long)]
    pub backend: Option<String>,
    /// original, no_think, name_only or think_many.
    #[arg(long)]
    pub variant: Option<VariantMode>,
    #[arg(long)]
    pub window_cap: Option<usize>,
    #[arg(long)]
    pub depth_cap: Option<usize>,
    /// Step budget as a multiple of the optimal step count.
    #[arg(long)]
    pub multiplier: Option<f64>,
    #[arg(long)]
    pub max_llm_calls: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the trace. With `--parallel`, run i writes to
    /// `<stem>-<i>.<ext>`.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// TOML file with any of the above plus run configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of independent runs to execute concurrently.
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(required = true, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// Price per 1k input tokens.
    #[arg(long, default_value_t = DEFAULT_PRICE_IN)]
    pub price_in: f64,
    /// Price per 1k output tokens.
    #[arg(long, default_value_t = DEFAULT_PRICE_OUT)]
    pub price_out: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Live,
    Scripted(PathBuf),
}

impl std::str::FromStr for BackendSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(BackendSpec::Live),
            _ => match s.strip_prefix("scripted:") {
                Some(path) if !path.is_empty() => Ok(BackendSpec::Scripted(PathBuf::from(path))),
                _ => bail!("backend must be `live` or `scripted:PATH`, got {s:?}"),
            },
        }
    }
}

impl BackendSpec {
    fn build(&self) -> Result<Box<dyn ChatBackend>> {
        match self {
            BackendSpec::Live => HttpChatBackend::from_env()
                .map(|b| Box::new(b) as Box<dyn ChatBackend>)
                .ok_or_else(|| {
                    anyhow!("the live backend needs {API_BASE_ENV} and {API_KEY_ENV}; use --backend scripted:PATH otherwise")
                }),
            BackendSpec::Scripted(path) => Ok(Box::new(ScriptedBackend::load(path)?)),
        }
    }
}

/// Fully resolved `run` invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub scenario: String,
    pub backend: BackendSpec,
    pub config: RunConfig,
    pub trace_out: Option<PathBuf>,
    pub parallel: usize,
}

const FILE_ONLY_KEYS: [&str; 4] = ["scenario", "backend", "trace_out", "parallel"];

/// Merges the config file (if any) with flags; flags win.
pub fn resolve(args: &RunArgs) -> Result<RunPlan> {
    let mut table = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("invalid config file {}", path.display()))?
        }
        None => toml::Table::new(),
    };
    let take_str = |table: &mut toml::Table, key: &str| -> Result<Option<String>> {
        match table.remove(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => bail!("config key {key} must be a string, got {other}"),
        }
    };
    let file_scenario = take_str(&mut table, FILE_ONLY_KEYS[0])?;
    let file_backend = take_str(&mut table, FILE_ONLY_KEYS[1])?;
    let file_trace = take_str(&mut table, FILE_ONLY_KEYS[2])?;
    let file_parallel = match table.remove(FILE_ONLY_KEYS[3]) {
        None => None,
        Some(toml::Value::Integer(n)) => Some(usize::try_from(n).context("parallel must be positive")?),
        Some(other) => bail!("config key parallel must be an integer, got {other}"),
    };
    let mut config: RunConfig = table.try_into().context("invalid run configuration")?;

    if let Some(v) = args.variant {
        config.variant.mode = v;
    }
    if let Some(d) = args.depth_cap {
        config.variant.depth_cap = Some(d);
    }
    if let Some(w) = args.window_cap {
        config.window_cap = w;
    }
    if let Some(m) = args.multiplier {
        config.max_step_multiplier = m;
    }
    if let Some(n) = args.max_llm_calls {
        config.max_llm_calls = Some(n);
    }
    if let Some(t) = args.temperature {
        config.decode.temperature = t;
    }
    if let Some(m) = &args.model {
        config.decode.model_name = m.clone();
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;

    let scenario = args
        .scenario
        .clone()
        .or(file_scenario)
        .ok_or_else(|| anyhow!("--scenario is required (one of {})", BUILTIN_SCENARIOS.join(", ")))?;
    if !BUILTIN_SCENARIOS.contains(&scenario.as_str()) {
        bail!("unknown scenario {scenario:?} (one of {})", BUILTIN_SCENARIOS.join(", "));
    }
    let backend = match args.backend.clone().or(file_backend) {
        Some(spec) => spec.parse()?,
        None if HttpChatBackend::from_env().is_some() => BackendSpec::Live,
        None => bail!("no backend given and {API_BASE_ENV}/{API_KEY_ENV} are unset; pass --backend scripted:PATH"),
    };
    let parallel = args.parallel.or(file_parallel).unwrap_or(1);
    if parallel == 0 {
        bail!("--parallel must be at least 1");
    }
    Ok(RunPlan {
        scenario,
        backend,
        config,
        trace_out: args.trace_out.clone().or(file_trace.map(PathBuf::from)),
        parallel,
    })
}

/// Trace path for run `index` (1-based) of `total`.
pub fn trace_path(base: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{index}.{ext}"),
        None => format!("{stem}-{index}"),
    };
    base.with_file_name(name)
}

/// Executes one run, streaming the trace to `trace_out` if given.
pub fn execute(plan: &RunPlan, trace_out: Option<&Path>) -> Result<(RunResult, Trace)> {
    let backend = plan.backend.build()?;
    let (mut env, _) = KitchenEnv::reset(&plan.scenario)?;
    let header = TraceHeader::new(&plan.scenario, &plan.config);
    let mut recorder = match trace_out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
            Recorder::streaming(header, BufWriter::new(file))?
        }
        None => Recorder::in_memory(header),
    };
    let result = run(&plan.config, &mut env, backend.as_ref(), &mut recorder)?;
    Ok((result, recorder.into_trace()))
}

fn summarize(out: &mut dyn Write, plan: &RunPlan, result: &RunResult, trace_out: Option<&Path>) -> Result<()> {
    let stats = result.tree.stats();
    writeln!(out, "scenario:    {}", plan.scenario)?;
    writeln!(out, "variant:     {}", plan.config.variant.mode)?;
    writeln!(out, "termination: {}", result.termination)?;
    if let Some(detail) = &result.detail {
        writeln!(out, "detail:      {detail}")?;
    }
    writeln!(out, "success:     {}", result.success)?;
    writeln!(out, "env_steps:   {} (budget {})", result.env_steps, result.step_budget)?;
    writeln!(out, "llm_calls:   {} (budget {})", result.llm_calls, result.call_budget)?;
    writeln!(
        out,
        "tree:        depth {}, {} nodes, branching {:.2}",
        stats.max_depth, stats.node_count, stats.avg_branching
    )?;
    if let Some(path) = trace_out {
        writeln!(out, "trace:       {}", path.display())?;
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let plan = resolve(args)?;
    let paths: Vec<Option<PathBuf>> = (1..=plan.parallel)
        .map(|i| plan.trace_out.as_deref().map(|p| trace_path(p, i, plan.parallel)))
        .collect();
    let results: Vec<Result<(RunResult, Trace)>> = if plan.parallel == 1 {
        vec![execute(&plan, paths[0].as_deref())]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = paths
                .iter()
                .map(|p| s.spawn(|| execute(&plan, p.as_deref())))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow!("run panicked"))))
                .collect()
        })
    };
    let mut solved = 0;
    for (i, (result, path)) in results.into_iter().zip(&paths).enumerate() {
        if plan.parallel > 1 {
            writeln!(out, "== run {}", i + 1)?;
        }
        let (result, _) = result?;
        summarize(out, &plan, &result, path.as_deref())?;
        solved += usize::from(result.success);
    }
    if plan.parallel > 1 {
        writeln!(out, "== solved {solved}/{}", plan.parallel)?;
    }
    Ok(if solved == plan.parallel { EXIT_OK } else { EXIT_FAILED })
}

pub fn cmd_replay(path: &Path, out: &mut dyn Write) -> Result<i32> {
    let trace = Trace::load(path)?;
    let report = trace::replay(&trace)?;
    writeln!(out, "{report}")?;
    Ok(if report.is_clean() { EXIT_OK } else { EXIT_FAILED })
}

/// One row of the stats table.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub name: String,
    pub success: f64,
    pub env_steps: f64,
    pub llm_calls: f64,
    pub depth: f64,
    pub branching: f64,
    pub cost: f64,
}

pub fn trace_row(name: &str, trace: &Trace, price_in: f64, price_out: f64) -> Result<TraceRow> {
    let end = trace.run_end().ok_or(trace::TraceError::Truncated)?;
    let stats = trace::tree_stats_from_trace(trace)?;
    Ok(TraceRow {
        name: name.to_string(),
        success: if end.success { 1.0 } else { 0.0 },
        env_steps: end.env_steps as f64,
        llm_calls: end.llm_calls as f64,
        depth: stats.max_depth as f64,
        branching: stats.avg_branching,
        cost: trace::cost_estimate(trace, price_in, price_out),
    })
}

pub fn mean_row(rows: &[TraceRow]) -> TraceRow {
    let n = rows.len() as f64;
    let mean = |f: fn(&TraceRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    TraceRow {
        name: format!("mean of {}", rows.len()),
        success: mean(|r| r.success),
        env_steps: mean(|r| r.env_steps),
        llm_calls: mean(|r| r.llm_calls),
        depth: mean(|r| r.depth),
        branching: mean(|r| r.branching),
        cost: mean(|r| r.cost),
    }
}

pub fn cmd_stats(args: &StatsArgs, out: &mut dyn Write) -> Result<i32> {
    if args.traces.is_empty() {
        bail!("stats needs at least one trace");
    }
    if args.price_in < 0.0 || args.price_out < 0.0 {
        bail!("prices must be non-negative");
    }
    let mut rows = Vec::new();
    for path in &args.traces {
        let trace = Trace::load(path)?;
        let name = path.display().to_string();
        rows.push(trace_row(&name, &trace, args.price_in, args.price_out).with_context(|| name.clone())?);
    }
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(12);
    writeln!(
        out,
        "{:<width$}  {:>7}  {:>9}  {:>9}  {:>6}  {:>9}  {:>9}",
        "trace", "success", "env_steps", "llm_calls", "depth", "branching", "cost"
    )?;
    let mut print = |r: &TraceRow| {
        writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>9.2}  {:>9.2}  {:>6.2}  {:>9.2}  {:>9.4}",
            r.name, r.success, r.env_steps, r.llm_calls, r.depth, r.branching, r.cost
        )
    };
    for r in &rows {
        print(r)?;
    }
    if rows.len() > 1 {
        print(&mean_row(&rows))?;
    }
    Ok(EXIT_OK)
}

/// Runs a parsed command, reporting errors on `err`.
pub fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, out),
        Command::Replay { trace } => cmd_replay(trace, out),
        Command::Stats(args) => cmd_stats(args, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_USAGE
        }
    }
}
