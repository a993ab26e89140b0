//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use kernel_tree::agents::provider::ScriptedProvider;
use kernel_tree::agents::simulated::{
    kernel_source, reference_source, SimulatedProvider, SimulatedProviderSpec,
};
use kernel_tree::agents::{self, Prompt};
use kernel_tree::anchors::parse_plan_response;
use kernel_tree::config::{AgentKind, RunConfig};
use kernel_tree::eval::{SimLandscapeSpec, SimulatedEvaluator};
use kernel_tree::policy::Branch;
use kernel_tree::rng::SearchRng;
use kernel_tree::templates::Templates;
use kernel_tree::tree::{EvaluationOutcome, NodeId, SearchTree};
use kernel_tree::window;

pub const RUNTIME_POOL: [f64; 5] = [10.0, 20.0, 30.0, 100.0, 150.0];

/// A tree as plain vectors, independent of `SearchTree`.
#[derive(Debug, Clone)]
pub struct Shape {
    pub parent: Vec<Option<usize>>,
    /// `None` for a failed attempt.
    pub runtime: Vec<Option<f64>>,
    pub source: Vec<String>,
    /// True when a failed attempt compiled.
    pub compiled: Vec<bool>,
}

impl Shape {
    pub fn with_root(source: &str, runtime: f64) -> Self {
        Self {
            parent: vec![None],
            runtime: vec![Some(runtime)],
            source: vec![source.to_string()],
            compiled: vec![true],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn push(
        &mut self,
        parent: usize,
        source: String,
        runtime: Option<f64>,
        compiled: bool,
    ) -> usize {
        self.parent.push(Some(parent));
        self.runtime.push(runtime);
        self.source.push(source);
        self.compiled.push(compiled || runtime.is_some());
        self.len() - 1
    }

    /// Random tree of 1..=max_nodes nodes with mixed outcomes, tied
    /// runtimes and duplicate sources that differ only in whitespace.
    pub fn random(rng: &mut SearchRng, max_nodes: usize) -> Self {
        let n = 1 + rng.index(max_nodes);
        let mut shape = Self::with_root("reference", 100.0);
        for j in 1..n {
            // bias toward recent nodes so that deep chains appear
            let parent = if rng.uniform() < 0.5 {
                j - 1 - rng.index(j.min(3))
            } else {
                rng.index(j)
            };
            let m = rng.index(n / 2 + 1);
            let source = match rng.index(3) {
                0 => format!("kernel_{m}\n"),
                1 => format!("kernel_{m}   \n\n\n"),
                _ => format!("\n\nkernel_{m}\n"),
            };
            match rng.index(4) {
                0 => shape.push(parent, source, None, false),
                1 => shape.push(parent, source, None, true),
                _ => shape.push(
                    parent,
                    source,
                    Some(RUNTIME_POOL[rng.index(RUNTIME_POOL.len())]),
                    true,
                ),
            };
        }
        shape
    }

    pub fn build(&self) -> SearchTree {
        let root = EvaluationOutcome::success(self.runtime[0].unwrap()).unwrap();
        let mut tree = SearchTree::new(self.source[0].clone(), root).unwrap();
        for j in 1..self.len() {
            let outcome = match (self.runtime[j], self.compiled[j]) {
                (Some(rt), _) => EvaluationOutcome::success(rt).unwrap(),
                (None, true) => EvaluationOutcome::incorrect("output mismatch"),
                (None, false) => EvaluationOutcome::compile_failure("error: expected ';'"),
            };
            let id = tree
                .add_child(
                    NodeId(self.parent[j].unwrap()),
                    self.source[j].clone(),
                    "",
                    "",
                    outcome,
                )
                .unwrap();
            assert_eq!(id, NodeId(j));
        }
        tree
    }

    pub fn score(&self, i: usize) -> f64 {
        self.runtime[i].unwrap_or(f64::INFINITY)
    }

    pub fn children(&self, i: usize) -> BTreeSet<usize> {
        (0..self.len())
            .filter(|&j| self.parent[j] == Some(i))
            .collect()
    }

    pub fn siblings(&self, i: usize) -> BTreeSet<usize> {
        match self.parent[i] {
            None => BTreeSet::from([i]),
            Some(p) => self.children(p),
        }
    }

    pub fn is_in_subtree(&self, j: usize, top: usize) -> bool {
        let mut cur = Some(j);
        while let Some(c) = cur {
            if c == top {
                return true;
            }
            cur = self.parent[c];
        }
        false
    }

    /// Top-r correct nodes outside subtree(exclude), ranked by (score, id),
    /// keeping the first of each group of identical sources.
    pub fn leaderboard(&self, r: usize, exclude: usize) -> Vec<usize> {
        let mut ranked: Vec<usize> = (0..self.len())
            .filter(|&j| self.runtime[j].is_some() && !self.is_in_subtree(j, exclude))
            .collect();
        ranked.sort_by(|&a, &b| {
            self.score(a)
                .partial_cmp(&self.score(b))
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut keys: Vec<&str> = Vec::new();
        let mut out = Vec::new();
        for j in ranked {
            let key = self.source[j].trim();
            if keys.contains(&key) {
                continue;
            }
            keys.push(key);
            out.push(j);
            if out.len() == r {
                break;
            }
        }
        out
    }

    fn without_mandatory(&self, i: usize, set: BTreeSet<usize>) -> BTreeSet<usize> {
        set.into_iter().filter(|&j| j != i && j != 0).collect()
    }

    pub fn plan_optional(&self, i: usize, r: usize) -> BTreeSet<usize> {
        let mut set = self.children(i);
        set.extend(self.leaderboard(r, i));
        self.without_mandatory(i, set)
    }

    pub fn code_optional(&self, i: usize) -> BTreeSet<usize> {
        let mut set = self.children(i);
        for s in self.siblings(i) {
            set.extend(self.children(s));
        }
        self.without_mandatory(i, set)
    }

    pub fn debug_optional(&self, i: usize) -> BTreeSet<usize> {
        self.without_mandatory(i, self.siblings(i))
    }

    pub fn mandatory_len(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            2
        }
    }

    pub fn root_throttled(&self, n_root: usize) -> bool {
        self.children(0).len() >= n_root
    }

    pub fn dead(&self, i: usize, n_child: usize) -> bool {
        let kids = self.children(i);
        kids.len() > n_child && kids.iter().all(|&k| self.runtime[k].is_none())
    }

    pub fn eligible(&self, n_root: usize, n_child: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !(i == 0 && self.root_throttled(n_root)) && !self.dead(i, n_child))
            .collect()
    }

    /// Eligible childless nodes, or every eligible node when none is a leaf.
    pub fn explore_pool(&self, eligible: &[usize]) -> Vec<usize> {
        let leaves: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&i| self.children(i).is_empty())
            .collect();
        if leaves.is_empty() {
            eligible.to_vec()
        } else {
            leaves
        }
    }

    pub fn argmin(&self, eligible: &[usize]) -> usize {
        let mut best = eligible[0];
        for &i in &eligible[1..] {
            if self.score(i) < self.score(best) {
                best = i;
            }
        }
        best
    }
}

pub fn ids(set: &BTreeSet<usize>) -> BTreeSet<NodeId> {
    set.iter().copied().map(NodeId).collect()
}

/// Directive factors of the default landscape, written out by hand.
pub fn factor(directive: &str) -> Option<f64> {
    match directive {
        "tile" => Some(0.6),
        "vectorize" => Some(0.8),
        "fuse" => Some(0.7),
        "unroll" => Some(0.9),
        _ => None,
    }
}

/// Expected outcome of a kernel built from `lines`: compiled, correct,
/// runtime.
pub fn expected_outcome(lines: &[&str]) -> (bool, bool, Option<f64>) {
    if lines.iter().any(|l| l.contains("BUG")) {
        return (false, false, None);
    }
    let mut seen: Vec<&str> = Vec::new();
    let mut runtime = 100.0;
    for l in lines {
        let Some(name) = l.strip_prefix("// OPT:") else {
            continue;
        };
        let Some(f) = factor(name) else { continue };
        if seen.contains(&name) {
            return (true, false, None);
        }
        seen.push(name);
        runtime *= f;
    }
    (true, true, Some(runtime))
}

pub fn kernel(lines: &[&str]) -> String {
    kernel_source(&lines.iter().map(|l| l.to_string()).collect::<Vec<_>>())
}

pub fn fenced(prose: &str, code: &str) -> String {
    format!("{prose}\n\n```python\n{code}```\n")
}

/// A plan reply whose scaffold keeps `lines` and marks one proposal.
pub fn plan_reply(lines: &[&str], proposal: &str) -> String {
    let mut all: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    all.push("// <<<IMPROVE BEGIN>>>".into());
    all.push(format!("// apply {proposal} here"));
    all.push("// <<<IMPROVE END>>>".into());
    fenced(&format!("Advice: apply {proposal}."), &kernel_source(&all))
}

pub fn code_reply(lines: &[&str]) -> String {
    fenced("Here is the new kernel.", &kernel(lines))
}

pub fn evaluator() -> SimulatedEvaluator {
    SimulatedEvaluator {
        spec: SimLandscapeSpec::default(),
    }
}

pub fn simulated_provider(seed: u64) -> SimulatedProvider {
    SimulatedProvider::new(SimulatedProviderSpec {
        seed,
        ..SimulatedProviderSpec::default()
    })
}

pub fn config(agent: AgentKind, seed: u64, budget: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.run.agent = agent;
    c.run.budget = budget;
    c.run.task_id = "relu".into();
    c.set_seed(seed);
    c
}

/// One expected iteration of a search run.
#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub selected: usize,
    pub branch: Branch,
    pub debug: bool,
    pub child: usize,
    pub compiled: bool,
    pub correct: bool,
    pub runtime_ms: Option<f64>,
}

/// Code and debug replies of the replay script, per attempt (1-based).
pub fn replay_code_lines(attempt: usize) -> Vec<&'static str> {
    const TABLE: [&[&str]; 12] = [
        &["// OPT:tile"],
        &["// OPT:fuse", "// BUG"],
        &["// OPT:tile", "// OPT:fuse"],
        &["// OPT:unroll"],
        &["// OPT:tile", "// OPT:tile"],
        &["// OPT:vectorize", "// BUG"],
        &["// OPT:tile", "// OPT:fuse", "// OPT:vectorize"],
        &["// BUG"],
        &["// OPT:fuse", "// OPT:unroll"],
        &["// OPT:tile", "// OPT:vectorize"],
        &["// OPT:fuse", "// OPT:fuse"],
        &[
            "// OPT:tile",
            "// OPT:fuse",
            "// OPT:vectorize",
            "// OPT:unroll",
        ],
    ];
    TABLE[(attempt - 1) % TABLE.len()].to_vec()
}

pub fn replay_debug_lines(attempt: usize) -> Vec<&'static str> {
    if attempt.is_multiple_of(3) {
        vec!["// OPT:vectorize", "// BUG"]
    } else {
        vec!["// OPT:vectorize"]
    }
}

/// Keyed script answering every plan, code and debug call up to `budget`.
pub fn replay_script(budget: usize) -> ScriptedProvider {
    let mut entries = Vec::new();
    for a in 1..=budget {
        entries.push(((agents::KIND_PLAN, a), plan_reply(&[], "tile")));
        entries.push(((agents::KIND_CODE, a), code_reply(&replay_code_lines(a))));
        entries.push(((agents::KIND_DEBUG, a), code_reply(&replay_debug_lines(a))));
    }
    ScriptedProvider::keyed(entries)
}

/// Execute the search loop by hand on plain vectors, drawing from the
/// stream in the documented order: selection, then the plan and code
/// window caps (or the debug window cap).
pub fn replay(seed: u64, budget: usize, epsilon: f64, cap: usize) -> Vec<Expected> {
    let mut shape = Shape::with_root(&reference_source(), 100.0);
    let mut rng = SearchRng::seed_from_u64(seed);
    let mut out = Vec::new();
    let cap_draw = |shape: &Shape, i: usize, optional: usize, rng: &mut SearchRng| {
        if shape.mandatory_len(i) + optional > cap {
            rng.sample_indices(optional, cap - shape.mandatory_len(i));
        }
    };
    for attempt in 1..=budget {
        let eligible = shape.eligible(5, 3);
        let (selected, branch) = if rng.uniform() < epsilon {
            let pool = shape.explore_pool(&eligible);
            (pool[rng.index(pool.len())], Branch::Explore)
        } else {
            (shape.argmin(&eligible), Branch::Exploit)
        };
        let debug = selected != 0 && shape.runtime[selected].is_none();
        let lines = if debug {
            cap_draw(
                &shape,
                selected,
                shape.debug_optional(selected).len(),
                &mut rng,
            );
            replay_debug_lines(attempt)
        } else {
            cap_draw(
                &shape,
                selected,
                shape.plan_optional(selected, 2).len(),
                &mut rng,
            );
            cap_draw(
                &shape,
                selected,
                shape.code_optional(selected).len(),
                &mut rng,
            );
            replay_code_lines(attempt)
        };
        let (compiled, correct, runtime_ms) = expected_outcome(&lines);
        let child = shape.push(selected, kernel(&lines), runtime_ms, compiled);
        out.push(Expected {
            selected,
            branch,
            debug,
            child,
            compiled,
            correct,
            runtime_ms,
        });
    }
    out
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("golden")
}

/// Root plus two attempts: a correct one and one that failed to compile.
pub fn golden_tree() -> SearchTree {
    let mut tree = SearchTree::new(
        reference_source(),
        EvaluationOutcome::success(100.0).unwrap(),
    )
    .unwrap();
    tree.add_child(
        NodeId(0),
        kernel(&["// OPT:tile"]),
        "Tile the loads.",
        "",
        EvaluationOutcome::success(60.0).unwrap(),
    )
    .unwrap();
    tree.add_child(
        NodeId(0),
        kernel(&["// OPT:fuse", "BUG"]),
        "Fuse the elementwise ops.",
        "",
        EvaluationOutcome::compile_failure(
            "relu.cu(7): error: identifier \"BUG\" is undefined\n1 error detected",
        ),
    )
    .unwrap();
    tree
}

/// Plan and code prompts for the root and a debug prompt for the failed
/// attempt, all with the builtin templates.
pub fn golden_prompts() -> Vec<(&'static str, Prompt)> {
    let tree = golden_tree();
    let templates = Templates::builtin();
    let mut rng = SearchRng::seed_from_u64(0);
    let plan_w = window::build_plan_window(&tree, NodeId(0), 2, 5, &mut rng).unwrap();
    let code_w = window::build_code_window(&tree, NodeId(0), 5, &mut rng).unwrap();
    let debug_w = window::build_debug_window(&tree, NodeId(2), 5, &mut rng).unwrap();
    let scaffold = parse_plan_response(&plan_reply(&["// OPT:tile"], "fuse")).unwrap();
    vec![
        (
            "plan",
            agents::plan_prompt(&plan_w, &tree, &templates).unwrap(),
        ),
        (
            "code",
            agents::code_prompt(&code_w, &tree, &scaffold, &templates).unwrap(),
        ),
        (
            "debug",
            agents::debug_prompt(&debug_w, &tree, &templates).unwrap(),
        ),
    ]
}
