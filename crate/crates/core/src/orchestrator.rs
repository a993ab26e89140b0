//! Search loop and the two baseline loops, with per-attempt checkpoints.
//!
//! Every iteration adds exactly one child to the tree. Run directory:
//!
//! ```text
//! config.resolved.json   resolved configuration
//! tree.json              tree checkpoint
//! rng.json               random stream state and completed attempt count
//! calls/NNN_kind.json    one audit record per provider call
//! events.ndjson          one record per attempt
//! report.json            final report
//! ```
//!
//! Random draws per search iteration happen in a fixed order: selection,
//! then the plan window cap and the code window cap (or the debug window
//! cap). Windows are built before any provider call, so agent failures do
//! not shift the stream.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{self, AgentFailure, AgentRunner, CallRecord, Provider};
use crate::config::{AgentKind, ConfigError, RunConfig};
use crate::eval::Evaluator;
use crate::policy::{self, Branch, PolicyError};
use crate::rng::SearchRng;
use crate::templates::Templates;
use crate::tree::{EvaluationOutcome, Node, NodeId, SearchTree, TreeError};
use crate::window::{self, WindowError};

pub const CONFIG_FILE: &str = "config.resolved.json";
pub const TREE_FILE: &str = "tree.json";
pub const RNG_FILE: &str = "rng.json";
pub const CALLS_DIR: &str = "calls";
pub const EVENTS_FILE: &str = "events.ndjson";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("baseline evaluation of the reference failed: {0}")]
    Baseline(String),
    #[error("run directory {0} already holds a run")]
    AlreadyStarted(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Window(#[from] WindowError),
}

/// Whether a node needs repair: it failed to compile or failed its
/// correctness check. Never true for the root.
pub fn has_bug(node: &Node) -> bool {
    node.has_bug()
}

/// What an iteration did with the selected node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    PlanCode,
    Debug,
    Sample,
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub attempt: usize,
    pub selected: NodeId,
    /// Explore or exploit, for search iterations.
    pub branch: Option<Branch>,
    pub step: Step,
    pub child: NodeId,
    pub compiled: bool,
    pub correct: bool,
    pub runtime_ms: Option<f64>,
    pub agent_failure: Option<String>,
    /// The provider call itself failed, as opposed to its output.
    pub provider_failure: bool,
    /// The code agent changed lines outside the marked regions.
    pub edits_outside_regions: Option<bool>,
    /// Best correct runtime over all attempts so far.
    pub best_runtime_ms: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The policy found no eligible node before the budget ran out.
    Exhausted,
    Interrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task_id: String,
    pub agent: AgentKind,
    pub status: RunStatus,
    pub best_node: NodeId,
    pub best_runtime_ms: Option<f64>,
    pub baseline_runtime_ms: f64,
    pub attempts_used: usize,
    pub budget: usize,
    pub events: Vec<Event>,
}

impl RunReport {
    /// (compiled, correct) per attempt.
    pub fn attempt_flags(&self) -> Vec<(bool, bool)> {
        self.events
            .iter()
            .map(|e| (e.compiled, e.correct))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngCheckpoint {
    rng: SearchRng,
    attempts_done: usize,
    exhausted: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop once this many attempts are complete, as if the process had
    /// been killed at that boundary.
    pub stop_after: Option<usize>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write through a temporary file and rename into place.
fn write_atomic(path: &Path, contents: &str) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn run_id(config: &RunConfig) -> String {
    let task = if config.run.task_id.is_empty() {
        "task"
    } else {
        &config.run.task_id
    };
    format!("{task}/{}", config.run.agent)
}

struct RunState<'a> {
    config: RunConfig,
    dir: PathBuf,
    tree: SearchTree,
    rng: SearchRng,
    attempts_done: usize,
    exhausted: bool,
    events: Vec<Event>,
    templates: Templates,
    provider: &'a dyn Provider,
    evaluator: &'a dyn Evaluator,
}

impl<'a> RunState<'a> {
    fn checkpoint(&self, calls: &[CallRecord], event: Option<&Event>) -> Result<(), RunError> {
        let calls_dir = self.dir.join(CALLS_DIR);
        for c in calls {
            let path = calls_dir.join(c.file_name());
            let text = serde_json::to_string_pretty(c).expect("call serializes") + "\n";
            write_atomic(&path, &text)?;
        }
        if let Some(e) = event {
            let path = self.dir.join(EVENTS_FILE);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            let line = serde_json::to_string(e).expect("event serializes") + "\n";
            f.write_all(line.as_bytes()).map_err(io_err(&path))?;
        }
        write_atomic(&self.dir.join(TREE_FILE), &self.tree.to_json())?;
        let rng = RngCheckpoint {
            rng: self.rng.clone(),
            attempts_done: self.attempts_done,
            exhausted: self.exhausted,
        };
        write_atomic(
            &self.dir.join(RNG_FILE),
            &(serde_json::to_string_pretty(&rng).expect("rng serializes") + "\n"),
        )
    }

    fn report(&self, status: RunStatus) -> RunReport {
        let best = self.tree.best();
        RunReport {
            task_id: self.config.run.task_id.clone(),
            agent: self.config.run.agent,
            status,
            best_node: best,
            best_runtime_ms: self.tree.best_attempt_runtime(),
            baseline_runtime_ms: self
                .tree
                .root_node()
                .outcome
                .runtime_ms()
                .unwrap_or(f64::NAN),
            attempts_used: self.attempts_done,
            budget: self.config.run.budget,
            events: self.events.clone(),
        }
    }

    fn failed_outcome(failure: &AgentFailure) -> EvaluationOutcome {
        let prefix = if failure.is_parse() {
            "agent output parse failure"
        } else {
            "agent failure"
        };
        EvaluationOutcome::compile_failure(format!("{prefix}: {failure}"))
    }

    /// One search iteration. `None` when the policy has nothing to select.
    fn stark_iteration(
        &mut self,
        runner: &mut AgentRunner<'_>,
        attempt: usize,
    ) -> Result<Option<Event>, RunError> {
        let cfg = &self.config;
        let selection = match policy::select(&self.tree, &cfg.policy, &mut self.rng) {
            Ok(s) => s,
            Err(PolicyError::Exhausted) => return Ok(None),
        };
        let i = selection.node;
        let focus = self.tree.get(i)?.clone();
        let reference = self.tree.root_node().kernel_source.clone();
        let cap = cfg.run.window_cap;
        let (step, plan_text, scaffold_text, code, edits_outside) = if focus.has_bug() {
            let w = window::build_debug_window(&self.tree, i, cap, &mut self.rng)?;
            let code = runner.debug_step(&w, &self.tree, attempt);
            (
                Step::Debug,
                focus.plan_text.clone(),
                focus.anchored_scaffold.clone(),
                code,
                None,
            )
        } else {
            let wp = window::build_plan_window(
                &self.tree,
                i,
                cfg.run.leaderboard_r,
                cap,
                &mut self.rng,
            )?;
            let wc = window::build_code_window(&self.tree, i, cap, &mut self.rng)?;
            match runner.plan_step(&wp, &self.tree, attempt) {
                Ok(scaffold) => {
                    let code = runner.code_step(&wc, &self.tree, &scaffold, attempt);
                    let outside = code
                        .as_ref()
                        .ok()
                        .map(|c| agents::edits_outside_regions(&scaffold, c));
                    (
                        Step::PlanCode,
                        scaffold.advice,
                        scaffold.text,
                        code,
                        outside,
                    )
                }
                Err(e) => (Step::PlanCode, String::new(), String::new(), Err(e), None),
            }
        };
        let (kernel, outcome, failure) = match code {
            Ok(k) => {
                let outcome = self.evaluator.evaluate(&reference, &k);
                (k, outcome, None)
            }
            Err(f) => (String::new(), Self::failed_outcome(&f), Some(f)),
        };
        let child = self
            .tree
            .add_child(i, kernel, plan_text, scaffold_text, outcome)?;
        Ok(Some(self.event(
            attempt,
            i,
            Some(selection.branch),
            step,
            child,
            failure,
            edits_outside,
        )))
    }

    fn baseline_iteration(
        &mut self,
        runner: &mut AgentRunner<'_>,
        attempt: usize,
    ) -> Result<Event, RunError> {
        let (parent, step, kind) = match self.config.run.agent {
            AgentKind::Sampling => (self.tree.root(), Step::Sample, agents::KIND_SAMPLE),
            _ => {
                let last = if self.config.run.reflexion_from_last_success {
                    self.tree
                        .ids()
                        .filter(|id| self.tree.node(*id).outcome.is_success())
                        .last()
                        .unwrap_or(self.tree.root())
                } else {
                    NodeId(self.tree.len() - 1)
                };
                (last, Step::Reflect, agents::KIND_REFLECT)
            }
        };
        let reference = self.tree.root_node().kernel_source.clone();
        let (kernel, outcome, failure) =
            match runner.baseline_step(&self.tree, parent, kind, attempt) {
                Ok(k) => {
                    let outcome = self.evaluator.evaluate(&reference, &k);
                    (k, outcome, None)
                }
                Err(f) => (String::new(), Self::failed_outcome(&f), Some(f)),
            };
        let child = self
            .tree
            .add_child(parent, kernel, String::new(), String::new(), outcome)?;
        Ok(self.event(attempt, parent, None, step, child, failure, None))
    }

    #[allow(clippy::too_many_arguments)]
    fn event(
        &self,
        attempt: usize,
        selected: NodeId,
        branch: Option<Branch>,
        step: Step,
        child: NodeId,
        agent_failure: Option<AgentFailure>,
        edits_outside_regions: Option<bool>,
    ) -> Event {
        let o = &self.tree.node(child).outcome;
        Event {
            attempt,
            selected,
            branch,
            step,
            child,
            compiled: o.compiled(),
            correct: o.correct(),
            runtime_ms: o.runtime_ms(),
            provider_failure: matches!(agent_failure, Some(AgentFailure::Provider(_))),
            agent_failure: agent_failure.map(|f| f.to_string()),
            edits_outside_regions,
            best_runtime_ms: self.tree.best_attempt_runtime(),
        }
    }

    fn drive(mut self, options: &RunOptions) -> Result<RunReport, RunError> {
        let provider = self.provider;
        let templates = self.templates.clone();
        let roles = self.config.roles.clone();
        let mut runner = AgentRunner::new(provider, &roles, &templates, run_id(&self.config));
        runner.baseline_temperature = self.config.run.baseline_temperature;
        while self.attempts_done < self.config.run.budget && !self.exhausted {
            if options.stop_after.is_some_and(|k| self.attempts_done >= k) {
                return Ok(self.report(RunStatus::Interrupted));
            }
            let attempt = self.attempts_done + 1;
            let event = match self.config.run.agent {
                AgentKind::Stark => self.stark_iteration(&mut runner, attempt)?,
                _ => Some(self.baseline_iteration(&mut runner, attempt)?),
            };
            let calls = runner.take_calls();
            match event {
                Some(e) => {
                    log::info!(
                        "{} attempt {attempt}: node {} -> child {} ({:?})",
                        run_id(&self.config),
                        e.selected,
                        e.child,
                        e.runtime_ms
                    );
                    self.attempts_done = attempt;
                    self.checkpoint(&calls, Some(&e))?;
                    self.events.push(e);
                }
                None => {
                    self.exhausted = true;
                    self.checkpoint(&calls, None)?;
                }
            }
        }
        let status = if self.exhausted {
            RunStatus::Exhausted
        } else {
            RunStatus::Completed
        };
        let report = self.report(status);
        write_atomic(&self.dir.join(REPORT_FILE), &report.to_json())?;
        Ok(report)
    }
}

/// Start a fresh run in `run_dir` with the agent named in the config.
pub fn start(
    config: &RunConfig,
    reference_source: &str,
    provider: &dyn Provider,
    evaluator: &dyn Evaluator,
    run_dir: &Path,
    options: &RunOptions,
) -> Result<RunReport, RunError> {
    config.validate()?;
    let templates = config.templates()?;
    if run_dir.join(TREE_FILE).exists() || run_dir.join(RNG_FILE).exists() {
        return Err(RunError::AlreadyStarted(run_dir.display().to_string()));
    }
    let baseline = evaluator.evaluate(reference_source, reference_source);
    if !baseline.is_success() {
        let log = format!("{} {}", baseline.compiler_log(), baseline.execution_log());
        return Err(RunError::Baseline(log.trim().to_string()));
    }
    let tree = SearchTree::new(reference_source, baseline)?;
    let calls_dir = run_dir.join(CALLS_DIR);
    fs::create_dir_all(&calls_dir).map_err(io_err(&calls_dir))?;
    write_atomic(&run_dir.join(CONFIG_FILE), &config.to_json())?;
    let events_path = run_dir.join(EVENTS_FILE);
    fs::write(&events_path, "").map_err(io_err(&events_path))?;
    let state = RunState {
        config: config.clone(),
        dir: run_dir.to_path_buf(),
        tree,
        rng: SearchRng::seed_from_u64(config.run.seed),
        attempts_done: 0,
        exhausted: false,
        events: Vec::new(),
        templates,
        provider,
        evaluator,
    };
    state.checkpoint(&[], None)?;
    state.drive(options)
}

fn with_agent(config: &RunConfig, agent: AgentKind) -> RunConfig {
    let mut c = config.clone();
    c.run.agent = agent;
    c
}

pub fn run_stark(
    config: &RunConfig,
    reference_source: &str,
    provider: &dyn Provider,
    evaluator: &dyn Evaluator,
    run_dir: &Path,
) -> Result<RunReport, RunError> {
    start(
        &with_agent(config, AgentKind::Stark),
        reference_source,
        provider,
        evaluator,
        run_dir,
        &RunOptions::default(),
    )
}

pub fn run_sampling(
    config: &RunConfig,
    reference_source: &str,
    provider: &dyn Provider,
    evaluator: &dyn Evaluator,
    run_dir: &Path,
) -> Result<RunReport, RunError> {
    start(
        &with_agent(config, AgentKind::Sampling),
        reference_source,
        provider,
        evaluator,
        run_dir,
        &RunOptions::default(),
    )
}

pub fn run_reflexion(
    config: &RunConfig,
    reference_source: &str,
    provider: &dyn Provider,
    evaluator: &dyn Evaluator,
    run_dir: &Path,
) -> Result<RunReport, RunError> {
    start(
        &with_agent(config, AgentKind::Reflexion),
        reference_source,
        provider,
        evaluator,
        run_dir,
        &RunOptions::default(),
    )
}

fn read(path: &Path) -> Result<String, RunError> {
    if !path.exists() {
        return Err(RunError::Checkpoint(format!("missing {}", path.display())));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

/// Configuration recorded in a run directory.
pub fn load_config(run_dir: &Path) -> Result<RunConfig, RunError> {
    RunConfig::from_json(&read(&run_dir.join(CONFIG_FILE))?)
        .map_err(|e| RunError::Checkpoint(e.to_string()))
}

/// Tree checkpoint of a run directory.
pub fn load_tree(run_dir: &Path) -> Result<SearchTree, RunError> {
    SearchTree::from_json(&read(&run_dir.join(TREE_FILE))?)
        .map_err(|e| RunError::Checkpoint(e.to_string()))
}

/// Final report of a finished run.
pub fn load_report(run_dir: &Path) -> Result<RunReport, RunError> {
    serde_json::from_str(&read(&run_dir.join(REPORT_FILE))?)
        .map_err(|e| RunError::Checkpoint(format!("report.json: {e}")))
}

/// Continue a checkpointed run to its budget.
pub fn resume(
    run_dir: &Path,
    provider: &dyn Provider,
    evaluator: &dyn Evaluator,
    options: &RunOptions,
) -> Result<RunReport, RunError> {
    let config = load_config(run_dir)?;
    let templates = config.templates()?;
    let tree = load_tree(run_dir)?;
    let rng: RngCheckpoint = serde_json::from_str(&read(&run_dir.join(RNG_FILE))?)
        .map_err(|e| RunError::Checkpoint(format!("rng.json: {e}")))?;
    if tree.attempts() != rng.attempts_done {
        return Err(RunError::Checkpoint(format!(
            "tree holds {} attempts but the counter says {}",
            tree.attempts(),
            rng.attempts_done
        )));
    }
    // drop event lines written after the last complete checkpoint
    let events_path = run_dir.join(EVENTS_FILE);
    let text = if events_path.exists() {
        fs::read_to_string(&events_path).map_err(io_err(&events_path))?
    } else {
        String::new()
    };
    let mut events = Vec::new();
    for line in text.lines().take(rng.attempts_done) {
        events.push(
            serde_json::from_str::<Event>(line)
                .map_err(|e| RunError::Checkpoint(format!("events.ndjson: {e}")))?,
        );
    }
    if events.len() != rng.attempts_done {
        return Err(RunError::Checkpoint(
            "events.ndjson is shorter than the attempt counter".into(),
        ));
    }
    let kept: String = events
        .iter()
        .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
        .collect();
    if kept != text {
        fs::write(&events_path, kept).map_err(io_err(&events_path))?;
    }
    let state = RunState {
        config,
        dir: run_dir.to_path_buf(),
        tree,
        rng: rng.rng,
        attempts_done: rng.attempts_done,
        exhausted: rng.exhausted,
        events,
        templates,
        provider,
        evaluator,
    };
    state.drive(options)
}
