//! Persistent search tree of kernel candidates.
//!
//! Every attempt becomes a node that hangs off the node it refined. The root
//! holds the reference architecture and its measured baseline. Nodes are
//! never mutated or removed once added; repairs create new children.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current `tree.json` schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("baseline must be correct (compiled and correct with a runtime)")]
    BaselineNotCorrect,
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("unsupported tree schema version {0}")]
    SchemaVersion(u32),
    #[error("malformed tree document: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum OutcomeError {
    #[error("correct outcome must also be compiled")]
    CorrectNotCompiled,
    #[error("runtime must be present exactly when the kernel compiled and is correct")]
    RuntimeMismatch,
    #[error("runtime must be positive and finite, got {0}")]
    BadRuntime(f64),
}

/// Result of compiling, checking, and timing one kernel.
///
/// Fields are private so `runtime_ms` is present iff the kernel is correct.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationOutcome {
    compiled: bool,
    correct: bool,
    runtime_ms: Option<f64>,
    compiler_log: String,
    execution_log: String,
}

impl EvaluationOutcome {
    pub fn new(
        compiled: bool,
        correct: bool,
        runtime_ms: Option<f64>,
        compiler_log: impl Into<String>,
        execution_log: impl Into<String>,
    ) -> Result<Self, OutcomeError> {
        if correct && !compiled {
            return Err(OutcomeError::CorrectNotCompiled);
        }
        match runtime_ms {
            Some(rt) if !(rt.is_finite() && rt > 0.0) => return Err(OutcomeError::BadRuntime(rt)),
            Some(_) if !correct => return Err(OutcomeError::RuntimeMismatch),
            None if correct => return Err(OutcomeError::RuntimeMismatch),
            _ => {}
        }
        Ok(Self {
            compiled,
            correct,
            runtime_ms,
            compiler_log: compiler_log.into(),
            execution_log: execution_log.into(),
        })
    }

    pub fn success(runtime_ms: f64) -> Result<Self, OutcomeError> {
        Self::new(true, true, Some(runtime_ms), "", "")
    }

    pub fn compile_failure(compiler_log: impl Into<String>) -> Self {
        Self {
            compiled: false,
            correct: false,
            runtime_ms: None,
            compiler_log: compiler_log.into(),
            execution_log: String::new(),
        }
    }

    pub fn incorrect(execution_log: impl Into<String>) -> Self {
        Self {
            compiled: true,
            correct: false,
            runtime_ms: None,
            compiler_log: String::new(),
            execution_log: execution_log.into(),
        }
    }

    pub fn with_logs(
        mut self,
        compiler_log: impl Into<String>,
        execution_log: impl Into<String>,
    ) -> Self {
        self.compiler_log = compiler_log.into();
        self.execution_log = execution_log.into();
        self
    }

    pub fn compiled(&self) -> bool {
        self.compiled
    }

    pub fn correct(&self) -> bool {
        self.correct
    }

    pub fn runtime_ms(&self) -> Option<f64> {
        self.runtime_ms
    }

    pub fn compiler_log(&self) -> &str {
        &self.compiler_log
    }

    pub fn execution_log(&self) -> &str {
        &self.execution_log
    }

    pub fn is_success(&self) -> bool {
        self.compiled && self.correct && self.runtime_ms.is_some()
    }

    /// Runtime when correct, `+inf` otherwise. Lower is better.
    pub fn score(&self) -> f64 {
        match (self.compiled && self.correct, self.runtime_ms) {
            (true, Some(rt)) => rt,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub kernel_source: String,
    pub plan_text: String,
    pub anchored_scaffold: String,
    pub outcome: EvaluationOutcome,
    pub attempt_index: usize,
}

impl Node {
    pub fn score(&self) -> f64 {
        self.outcome.score()
    }

    /// Compile failure or failed correctness check. The root is the reference
    /// and never has a bug.
    pub fn has_bug(&self) -> bool {
        self.parent.is_some() && !(self.outcome.compiled() && self.outcome.correct())
    }
}

/// Score of a node: runtime in ms if correct, `+inf` otherwise.
pub fn score(node: &Node) -> f64 {
    node.score()
}

/// Source normalization used to decide whether two kernels are the same:
/// trailing whitespace is trimmed on every line and runs of blank lines
/// collapse to a single blank line.
pub fn normalize_source(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    let mut prev_blank = false;
    for line in src.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            if prev_blank {
                continue;
            }
            prev_blank = true;
        } else {
            prev_blank = false;
        }
        out.push_str(line);
        out.push('\n');
    }
    // leading/trailing blank runs are not significant
    out.trim_matches('\n').to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    nodes: Vec<Node>,
    children: Vec<Vec<NodeId>>,
}

impl SearchTree {
    /// Create a tree whose root is the reference architecture.
    pub fn new(
        reference_source: impl Into<String>,
        baseline: EvaluationOutcome,
    ) -> Result<Self, TreeError> {
        if !baseline.is_success() {
            return Err(TreeError::BaselineNotCorrect);
        }
        let root = Node {
            id: NodeId::ROOT,
            parent: None,
            kernel_source: reference_source.into(),
            plan_text: String::new(),
            anchored_scaffold: String::new(),
            outcome: baseline,
            attempt_index: 0,
        };
        Ok(Self {
            nodes: vec![root],
            children: vec![Vec::new()],
        })
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn root_node(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    pub fn get(&self, id: NodeId) -> Result<&Node, TreeError> {
        self.nodes.get(id.0).ok_or(TreeError::UnknownNode(id))
    }

    /// Node lookup for ids already known to be in the tree.
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn score_of(&self, id: NodeId) -> f64 {
        self.nodes[id.0].score()
    }

    /// Number of completed attempts (every node except the root).
    pub fn attempts(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn add_child(
        &mut self,
        parent: NodeId,
        kernel: impl Into<String>,
        plan: impl Into<String>,
        scaffold: impl Into<String>,
        outcome: EvaluationOutcome,
    ) -> Result<NodeId, TreeError> {
        if !self.contains(parent) {
            return Err(TreeError::UnknownNode(parent));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            parent: Some(parent),
            kernel_source: kernel.into(),
            plan_text: plan.into(),
            anchored_scaffold: scaffold.into(),
            outcome,
            attempt_index: id.0,
        });
        self.children.push(Vec::new());
        self.children[parent.0].push(id);
        Ok(id)
    }

    /// Children of `id` in creation order.
    pub fn children(&self, id: NodeId) -> Result<&[NodeId], TreeError> {
        self.children
            .get(id.0)
            .map(Vec::as_slice)
            .ok_or(TreeError::UnknownNode(id))
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>, TreeError> {
        Ok(self.get(id)?.parent)
    }

    /// Nodes sharing `id`'s parent, `id` included. The root is its own only
    /// sibling.
    pub fn siblings(&self, id: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
        match self.get(id)?.parent {
            None => Ok(BTreeSet::from([id])),
            Some(p) => Ok(self.children[p.0].iter().copied().collect()),
        }
    }

    /// Union of the children of every sibling of `id` (so it contains
    /// `children(id)` too).
    pub fn children_of_siblings(&self, id: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
        let sibs = self.siblings(id)?;
        Ok(sibs
            .iter()
            .flat_map(|s| self.children[s.0].iter().copied())
            .collect())
    }

    /// `id` and all of its descendants.
    pub fn subtree(&self, id: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
        self.get(id)?;
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.insert(n);
            stack.extend(self.children[n.0].iter().copied());
        }
        Ok(out)
    }

    /// Best correct, distinct kernels in ascending runtime (ties by id),
    /// optionally skipping one subtree. Returns at most `r` ids.
    pub fn leaderboard_top(&self, r: usize, exclude_subtree_of: Option<NodeId>) -> Vec<NodeId> {
        let excluded = match exclude_subtree_of {
            Some(id) => self.subtree(id).unwrap_or_default(),
            None => BTreeSet::new(),
        };
        let mut ranked: Vec<NodeId> = self
            .ids()
            .filter(|id| !excluded.contains(id) && self.score_of(*id).is_finite())
            .collect();
        ranked.sort_by(|a, b| {
            self.score_of(*a)
                .total_cmp(&self.score_of(*b))
                .then(a.cmp(b))
        });
        let mut seen = HashSet::new();
        ranked
            .into_iter()
            .filter(|id| seen.insert(normalize_source(&self.node(*id).kernel_source)))
            .take(r)
            .collect()
    }

    /// Fastest correct kernel. A candidate replaces the root only when it is
    /// at least as fast.
    pub fn best(&self) -> NodeId {
        let root_score = self.score_of(NodeId::ROOT);
        self.ids()
            .skip(1)
            .filter(|id| self.score_of(*id).is_finite())
            .min_by(|a, b| {
                self.score_of(*a)
                    .total_cmp(&self.score_of(*b))
                    .then(a.cmp(b))
            })
            .filter(|id| self.score_of(*id) <= root_score)
            .unwrap_or(NodeId::ROOT)
    }

    /// Fastest runtime among correct non-root attempts, if any.
    pub fn best_attempt_runtime(&self) -> Option<f64> {
        self.nodes[1..]
            .iter()
            .filter_map(|n| n.outcome.runtime_ms())
            .min_by(f64::total_cmp)
    }

    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            schema_version: SCHEMA_VERSION,
            root: NodeId::ROOT,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id,
                    parent: n.parent,
                    attempt_index: n.attempt_index,
                    kernel_source: n.kernel_source.clone(),
                    plan_text: n.plan_text.clone(),
                    anchored_scaffold: n.anchored_scaffold.clone(),
                    compiled: n.outcome.compiled(),
                    correct: n.outcome.correct(),
                    runtime_ms: n.outcome.runtime_ms(),
                    compiler_log: n.outcome.compiler_log().to_string(),
                    execution_log: n.outcome.execution_log().to_string(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: TreeDocument) -> Result<Self, TreeError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(TreeError::SchemaVersion(doc.schema_version));
        }
        if doc.root != NodeId::ROOT {
            return Err(TreeError::Malformed(format!(
                "root must be 0, got {}",
                doc.root
            )));
        }
        let mut iter = doc.nodes.into_iter();
        let root = iter
            .next()
            .ok_or_else(|| TreeError::Malformed("no nodes".into()))?;
        if root.id != NodeId::ROOT || root.parent.is_some() {
            return Err(TreeError::Malformed(
                "first node must be a parentless root".into(),
            ));
        }
        let baseline = root_outcome(&root)?;
        let mut tree = SearchTree::new(root.kernel_source, baseline)?;
        tree.nodes[0].plan_text = root.plan_text;
        tree.nodes[0].anchored_scaffold = root.anchored_scaffold;
        for rec in iter {
            let expected = NodeId(tree.len());
            if rec.id != expected {
                return Err(TreeError::Malformed(format!(
                    "node ids must be dense and ordered: expected {expected}, got {}",
                    rec.id
                )));
            }
            let parent = rec
                .parent
                .ok_or_else(|| TreeError::Malformed(format!("node {} has no parent", rec.id)))?;
            if parent >= rec.id {
                return Err(TreeError::Malformed(format!(
                    "node {} precedes its parent",
                    rec.id
                )));
            }
            if rec.attempt_index != rec.id.0 {
                return Err(TreeError::Malformed(format!(
                    "node {} has attempt index {}",
                    rec.id, rec.attempt_index
                )));
            }
            let outcome = root_outcome(&rec)?;
            tree.add_child(
                parent,
                rec.kernel_source,
                rec.plan_text,
                rec.anchored_scaffold,
                outcome,
            )?;
        }
        Ok(tree)
    }

    pub fn to_json(&self) -> String {
        // Serializing plain data into a string cannot fail.
        let mut s = serde_json::to_string_pretty(&self.to_document()).expect("tree serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let doc: TreeDocument =
            serde_json::from_str(text).map_err(|e| TreeError::Malformed(e.to_string()))?;
        Self::from_document(doc)
    }

    /// Graphviz description: one node per attempt labelled id, score and
    /// status, one edge per parent link.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph search_tree {\n");
        for n in &self.nodes {
            let status = if n.parent.is_none() {
                "root"
            } else if n.outcome.is_success() {
                "correct"
            } else if n.outcome.compiled() {
                "incorrect"
            } else {
                "compile_failure"
            };
            let score = match n.outcome.runtime_ms() {
                Some(rt) if n.outcome.is_success() => format!("{rt:.4} ms"),
                _ => "inf".to_string(),
            };
            out.push_str(&format!(
                "  n{} [label=\"{} | {score} | {status}\"];\n",
                n.id, n.id
            ));
        }
        for n in &self.nodes {
            if let Some(p) = n.parent {
                out.push_str(&format!("  n{p} -> n{};\n", n.id));
            }
        }
        out.push_str("}\n");
        out
    }
}

fn root_outcome(rec: &NodeRecord) -> Result<EvaluationOutcome, TreeError> {
    EvaluationOutcome::new(
        rec.compiled,
        rec.correct,
        rec.runtime_ms,
        rec.compiler_log.clone(),
        rec.execution_log.clone(),
    )
    .map_err(|e| TreeError::Malformed(format!("node {}: {e}", rec.id)))
}

/// On-disk form of a tree (`tree.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDocument {
    pub schema_version: u32,
    pub root: NodeId,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub attempt_index: usize,
    pub kernel_source: String,
    pub plan_text: String,
    pub anchored_scaffold: String,
    pub compiled: bool,
    pub correct: bool,
    pub runtime_ms: Option<f64>,
    pub compiler_log: String,
    pub execution_log: String,
}
