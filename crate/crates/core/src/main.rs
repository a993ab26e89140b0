use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kernel_tree::agents::{self, simulated, Provider};
use kernel_tree::config::{AgentKind, RunConfig};
use kernel_tree::eval::Evaluator;
use kernel_tree::metrics::{self, MetricSet, ReportFormat, TaskResult};
use kernel_tree::orchestrator::{self, RunError, RunOptions, RunReport};

const EXIT_CONFIG: u8 = 2;
const EXIT_EVALUATOR: u8 = 3;
const EXIT_PROVIDER: u8 = 4;

#[derive(Parser)]
#[command(
    name = "kernel-tree",
    version,
    about = "Agentic tree search for faster GPU kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Stark,
    Sampling,
    Reflexion,
}

impl From<AgentArg> for AgentKind {
    fn from(a: AgentArg) -> Self {
        match a {
            AgentArg::Stark => AgentKind::Stark,
            AgentArg::Sampling => AgentKind::Sampling,
            AgentArg::Reflexion => AgentKind::Reflexion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Run an agent on every matching task.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        agent: Option<AgentArg>,
        /// Task glob relative to the tasks directory, without `.py`.
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
        /// Print the resolved config and the first prompt, then stop.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Continue an interrupted run.
    Resume { run_dir: PathBuf },
    /// Aggregate metrics over finished runs.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
    /// Print the search tree of a run as a graph.
    ExportTree {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "dot")]
        format: GraphFormat,
    },
    /// Send a known-good and a known-bad candidate through the evaluator.
    EvalCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Reference source to probe with; a built-in one otherwise.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

/// Failure with its process exit code.
struct Exit(u8, anyhow::Error);

fn config_err(e: impl Into<anyhow::Error>) -> Exit {
    Exit(EXIT_CONFIG, e.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Exit> {
    match path {
        Some(p) => RunConfig::load(p).map_err(config_err),
        None => Ok(RunConfig::default()),
    }
}

struct Task {
    id: String,
    source: String,
}

fn resolve_tasks(tasks_dir: &Path, patterns: &[String]) -> Result<Vec<Task>> {
    let mut found = BTreeMap::new();
    for pat in patterns {
        let full = tasks_dir.join(format!("{pat}.py"));
        let full = full.to_str().context("task path is not UTF-8")?;
        let mut any = false;
        for entry in glob::glob(full).with_context(|| format!("bad task glob {pat}"))? {
            let path = entry?;
            let rel = path
                .strip_prefix(tasks_dir)
                .unwrap_or(&path)
                .with_extension("");
            let id = rel.to_string_lossy().replace('\\', "/");
            let source = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            if !source.contains("class Model") {
                bail!("task {} does not define `class Model`", path.display());
            }
            found.insert(id, source);
            any = true;
        }
        if !any {
            bail!(
                "no task matches {}",
                tasks_dir.join(format!("{pat}.py")).display()
            );
        }
    }
    Ok(found
        .into_iter()
        .map(|(id, source)| Task { id, source })
        .collect())
}

fn run_error_exit(task: &str, e: RunError) -> Exit {
    let code = match e {
        RunError::Baseline(_) => EXIT_EVALUATOR,
        RunError::Config(_) | RunError::AlreadyStarted(_) => EXIT_CONFIG,
        _ => 1,
    };
    Exit(code, anyhow::Error::new(e).context(format!("task {task}")))
}

/// Every attempt failed in the provider call itself.
fn provider_unreachable(report: &RunReport) -> bool {
    !report.events.is_empty() && report.events.iter().all(|e| e.provider_failure)
}

fn finish_run(task: &str, result: Result<RunReport, RunError>) -> Result<(), Exit> {
    let report = result.map_err(|e| run_error_exit(task, e))?;
    if provider_unreachable(&report) {
        return Err(Exit(
            EXIT_PROVIDER,
            anyhow::anyhow!(
                "task {task}: every provider call failed ({})",
                report.events[0].agent_failure.clone().unwrap_or_default()
            ),
        ));
    }
    println!(
        "{task} [{}]: {:?}, best {} after {} attempts (baseline {:.4} ms)",
        report.agent,
        report.status,
        report
            .best_runtime_ms
            .map_or("none".to_string(), |b| format!("{b:.4} ms")),
        report.attempts_used,
        report.baseline_runtime_ms
    );
    Ok(())
}

fn dry_run(cfg: &RunConfig, task: &Task) -> Result<(), Exit> {
    let templates = cfg.templates().map_err(config_err)?;
    let role = match cfg.run.agent {
        AgentKind::Stark => kernel_tree::window::Role::Plan,
        _ => kernel_tree::window::Role::Code,
    };
    let prompt = agents::assemble_prompt(
        agents::instruction(role, &templates),
        &task.source,
        "",
        &task.source,
        &templates,
    )
    .map_err(config_err)?;
    print!("{}", cfg.to_json());
    println!(
        "--- system ---\n{}\n--- user ---\n{}",
        prompt.system_text, prompt.user_text
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config: Option<PathBuf>,
    agent: Option<AgentArg>,
    tasks: Vec<String>,
    seed: Option<u64>,
    budget: Option<usize>,
    dry: bool,
    out: Option<PathBuf>,
    jobs: Option<usize>,
) -> Result<(), Exit> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(a) = agent {
        cfg.run.agent = a.into();
    }
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(b) = budget {
        cfg.run.budget = b;
    }
    if let Some(o) = out {
        cfg.run.out_dir = o;
    }
    if let Some(j) = jobs {
        cfg.run.jobs = j;
    }
    cfg.validate().map_err(config_err)?;
    let tasks = resolve_tasks(&cfg.run.tasks_dir, &tasks).map_err(config_err)?;
    if dry {
        let mut first = cfg.clone();
        first.run.task_id = tasks[0].id.clone();
        return dry_run(&first, &tasks[0]);
    }
    let provider = cfg.provider.build(cfg.run.seed).map_err(config_err)?;
    let evaluator = cfg.evaluator.build();
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, Exit)>> = Mutex::new(Vec::new());
    let workers = cfg.run.jobs.min(tasks.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(task) = tasks.get(k) else { break };
                let mut task_cfg = cfg.clone();
                task_cfg.run.task_id = task.id.clone();
                let dir = cfg.run.out_dir.join(&task.id).join(cfg.run.agent.as_str());
                let result = orchestrator::start(
                    &task_cfg,
                    &task.source,
                    provider.as_ref(),
                    evaluator.as_ref(),
                    &dir,
                    &RunOptions::default(),
                );
                if let Err(e) = finish_run(&task.id, result) {
                    failures.lock().expect("failure lock").push((k, e));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("failure lock");
    failures.sort_by_key(|(k, _)| *k);
    for (_, Exit(_, e)) in &failures {
        eprintln!("error: {e:#}");
    }
    let failed = failures.len();
    match failures.into_iter().next() {
        Some((_, Exit(code, _))) => Err(Exit(
            code,
            anyhow::anyhow!("{failed} of {} task(s) did not complete", tasks.len()),
        )),
        None => Ok(()),
    }
}

fn cmd_resume(run_dir: &Path) -> Result<(), Exit> {
    let cfg = orchestrator::load_config(run_dir).map_err(config_err)?;
    let provider: Box<dyn Provider> = cfg.provider.build(cfg.run.seed).map_err(config_err)?;
    let evaluator: Box<dyn Evaluator> = cfg.evaluator.build();
    let task = cfg.run.task_id.clone();
    finish_run(
        &task,
        orchestrator::resume(
            run_dir,
            provider.as_ref(),
            evaluator.as_ref(),
            &RunOptions::default(),
        ),
    )
}

fn cmd_report(run_dirs: &[PathBuf], format: FormatArg) -> Result<(), Exit> {
    let mut by_agent: BTreeMap<String, Vec<TaskResult>> = BTreeMap::new();
    for dir in run_dirs {
        let report = orchestrator::load_report(dir).map_err(|e| Exit(1, e.into()))?;
        by_agent
            .entry(report.agent.to_string())
            .or_default()
            .push(TaskResult::from_report(&report));
    }
    let sets: Vec<MetricSet> = by_agent
        .iter()
        .map(|(agent, results)| MetricSet::compute(agent.clone(), results))
        .collect();
    let format = match format {
        FormatArg::Text => ReportFormat::Text,
        FormatArg::Json => ReportFormat::Json,
    };
    print!("{}", metrics::render_report(&sets, format));
    Ok(())
}

fn cmd_export_tree(run_dir: &Path, _format: GraphFormat) -> Result<(), Exit> {
    let tree = orchestrator::load_tree(run_dir).map_err(|e| Exit(1, e.into()))?;
    print!("{}", tree.to_dot());
    Ok(())
}

fn cmd_eval_check(config: Option<PathBuf>, reference: Option<PathBuf>) -> Result<(), Exit> {
    let cfg = load_config(config.as_deref())?;
    let reference = match reference {
        Some(p) => std::fs::read_to_string(&p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(config_err)?,
        None => simulated::reference_source(),
    };
    let evaluator = cfg.evaluator.build();
    let good = evaluator.evaluate(&reference, &reference);
    let bad_source = format!(
        "class ModelNew(:\n    {}\n",
        cfg.evaluator.landscape.bug_token
    );
    let bad = evaluator.evaluate(&reference, &bad_source);
    let good_ok = good.is_success();
    let bad_ok = !bad.is_success();
    println!(
        "known-good probe: {} (compiled={}, correct={}, runtime={:?})",
        if good_ok { "PASS" } else { "FAIL" },
        good.compiled(),
        good.correct(),
        good.runtime_ms()
    );
    if !good_ok {
        println!("  {}", good.compiler_log());
    }
    println!(
        "known-bad probe: {} (compiled={}, correct={})",
        if bad_ok { "PASS" } else { "FAIL" },
        bad.compiled(),
        bad.correct()
    );
    if good_ok && bad_ok {
        Ok(())
    } else {
        Err(Exit(
            EXIT_EVALUATOR,
            anyhow::anyhow!("evaluator check failed"),
        ))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            agent,
            tasks,
            seed,
            budget,
            dry_run,
            out,
            jobs,
        } => cmd_run(config, agent, tasks, seed, budget, dry_run, out, jobs),
        Command::Resume { run_dir } => cmd_resume(&run_dir),
        Command::Report { run_dirs, format } => cmd_report(&run_dirs, format),
        Command::ExportTree { run_dir, format } => cmd_export_tree(&run_dir, format),
        Command::EvalCheck { config, reference } => cmd_eval_check(config, reference),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
