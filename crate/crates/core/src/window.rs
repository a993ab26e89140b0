//! Role-specific context windows.
//!
//! Each window always carries the focus node and the root. The optional
//! portion depends on the role:
//!
//! * plan: children of the focus plus the best distinct correct kernels
//!   outside the focus subtree,
//! * code: children of the focus plus the children of its siblings,
//! * debug: siblings of the focus.
//!
//! When a window would hold more than `cap` nodes, the optional portion is
//! sampled down uniformly without replacement; the mandatory pair stays.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SearchRng;
use crate::templates::{self, TemplateError, Templates};
use crate::tree::{Node, NodeId, SearchTree, TreeError};

/// Logs longer than this many characters keep only their tail.
pub const LOG_TAIL_CHARS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Plan,
    Code,
    Debug,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Plan, Role::Code, Role::Debug];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Plan => "plan",
            Role::Code => "code",
            Role::Debug => "debug",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum WindowError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("window cap {cap} is smaller than the {mandatory} mandatory nodes")]
    CapTooSmall { cap: usize, mandatory: usize },
    #[error("the root has no bug and cannot be debugged")]
    DebugRoot,
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub role: Role,
    pub focus: NodeId,
    pub mandatory: BTreeSet<NodeId>,
    /// Optional members after capping, ascending id.
    pub members: Vec<NodeId>,
    pub cap_applied: bool,
}

impl ContextWindow {
    /// Mandatory nodes and members together.
    pub fn rendered_set(&self) -> BTreeSet<NodeId> {
        self.mandatory
            .iter()
            .chain(self.members.iter())
            .copied()
            .collect()
    }
}

fn mandatory(tree: &SearchTree, i: NodeId) -> BTreeSet<NodeId> {
    BTreeSet::from([i, tree.root()])
}

/// Pre-cap optional portion of the plan window.
pub fn plan_candidates(
    tree: &SearchTree,
    i: NodeId,
    r: usize,
) -> Result<BTreeSet<NodeId>, TreeError> {
    let mut set: BTreeSet<NodeId> = tree.children(i)?.iter().copied().collect();
    set.extend(tree.leaderboard_top(r, Some(i)));
    let m = mandatory(tree, i);
    Ok(set.difference(&m).copied().collect())
}

/// Pre-cap optional portion of the code window.
pub fn code_candidates(tree: &SearchTree, i: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
    let mut set: BTreeSet<NodeId> = tree.children(i)?.iter().copied().collect();
    set.extend(tree.children_of_siblings(i)?);
    let m = mandatory(tree, i);
    Ok(set.difference(&m).copied().collect())
}

/// Pre-cap optional portion of the debug window.
pub fn debug_candidates(tree: &SearchTree, i: NodeId) -> Result<BTreeSet<NodeId>, TreeError> {
    let m = mandatory(tree, i);
    Ok(tree.siblings(i)?.difference(&m).copied().collect())
}

/// Keep `optional` when the window fits in `cap`; otherwise sample
/// `cap - |mandatory|` of it. Result is in ascending id order.
pub fn apply_cap(
    mandatory: &BTreeSet<NodeId>,
    optional: &BTreeSet<NodeId>,
    cap: usize,
    rng: &mut SearchRng,
) -> Result<(Vec<NodeId>, bool), WindowError> {
    if cap < mandatory.len() {
        return Err(WindowError::CapTooSmall {
            cap,
            mandatory: mandatory.len(),
        });
    }
    let pool: Vec<NodeId> = optional.iter().copied().collect();
    if mandatory.len() + pool.len() <= cap {
        return Ok((pool, false));
    }
    let mut kept: Vec<NodeId> = rng
        .sample_indices(pool.len(), cap - mandatory.len())
        .into_iter()
        .map(|k| pool[k])
        .collect();
    kept.sort();
    Ok((kept, true))
}

fn finish(
    tree: &SearchTree,
    role: Role,
    i: NodeId,
    optional: BTreeSet<NodeId>,
    cap: usize,
    rng: &mut SearchRng,
) -> Result<ContextWindow, WindowError> {
    let mandatory = mandatory(tree, i);
    let (members, cap_applied) = apply_cap(&mandatory, &optional, cap, rng)?;
    Ok(ContextWindow {
        role,
        focus: i,
        mandatory,
        members,
        cap_applied,
    })
}

pub fn build_plan_window(
    tree: &SearchTree,
    i: NodeId,
    r: usize,
    cap: usize,
    rng: &mut SearchRng,
) -> Result<ContextWindow, WindowError> {
    let optional = plan_candidates(tree, i, r)?;
    finish(tree, Role::Plan, i, optional, cap, rng)
}

pub fn build_code_window(
    tree: &SearchTree,
    i: NodeId,
    cap: usize,
    rng: &mut SearchRng,
) -> Result<ContextWindow, WindowError> {
    let optional = code_candidates(tree, i)?;
    finish(tree, Role::Code, i, optional, cap, rng)
}

pub fn build_debug_window(
    tree: &SearchTree,
    i: NodeId,
    cap: usize,
    rng: &mut SearchRng,
) -> Result<ContextWindow, WindowError> {
    if i == tree.root() {
        return Err(WindowError::DebugRoot);
    }
    let optional = debug_candidates(tree, i)?;
    finish(tree, Role::Debug, i, optional, cap, rng)
}

/// Keep the last `LOG_TAIL_CHARS` characters of a log.
pub fn truncate_log(log: &str) -> String {
    let total = log.chars().count();
    if total <= LOG_TAIL_CHARS {
        return log.to_string();
    }
    let skip = total - LOG_TAIL_CHARS;
    let start = log.char_indices().nth(skip).map_or(log.len(), |(b, _)| b);
    format!("[... {skip} characters elided ...]\n{}", &log[start..])
}

pub(crate) fn trim_text(text: &str) -> &str {
    text.trim_end_matches(['\n', '\r'])
}

/// Text for the compiler-observation slot.
pub fn compiler_observation(node: &Node) -> String {
    let log = trim_text(node.outcome.compiler_log());
    if log.is_empty() {
        "(no output)".to_string()
    } else {
        truncate_log(log)
    }
}

/// Text for the execution-result slot.
pub fn execution_result(node: &Node) -> String {
    let o = &node.outcome;
    let status = match (o.compiled(), o.correct(), o.runtime_ms()) {
        (true, true, Some(rt)) => format!("Compiled and correct. Runtime: {rt:.4} ms"),
        (true, _, _) => "Compiled but incorrect.".to_string(),
        (false, _, _) => "Compilation failed; not executed.".to_string(),
    };
    let log = trim_text(o.execution_log());
    if log.is_empty() {
        status
    } else {
        format!("{status}\n{}", truncate_log(log))
    }
}

/// Source followed by the node's observations, under the same headings the
/// history blocks use.
pub fn focus_text(node: &Node, templates: &Templates) -> Result<String, TemplateError> {
    let parts = templates.frame_parts()?;
    let obs_start = parts
        .history_block
        .find("**Compiler Observation**")
        .ok_or_else(|| TemplateError::MissingPlaceholder {
            file: templates::FRAME.into(),
            placeholder: "**Compiler Observation**".into(),
        })?;
    let observations = templates::fill(
        &parts.history_block[obs_start..],
        &[
            (templates::PH_COMPILER_LOG, &compiler_observation(node)),
            (templates::PH_RESULT, &execution_result(node)),
        ],
    );
    Ok(format!(
        "{}\n\n{}",
        trim_text(&node.kernel_source),
        trim_text(&observations)
    ))
}

/// Numbered history blocks for the window members, preceded by the history
/// heading. Empty when the window has no members.
pub fn render_history(
    window: &ContextWindow,
    tree: &SearchTree,
    templates: &Templates,
) -> Result<String, WindowError> {
    if window.members.is_empty() {
        return Ok(String::new());
    }
    let parts = templates.frame_parts()?;
    let mut out = parts.history_preamble.clone();
    for (k, id) in window.members.iter().enumerate() {
        let node = tree.get(*id)?;
        let numbered = parts
            .history_block
            .replacen("#1", &format!("#{}", k + 1), 1);
        let block = templates::fill(
            &numbered,
            &[
                (templates::PH_HISTORY_SOURCE, trim_text(&node.kernel_source)),
                (templates::PH_COMPILER_LOG, &compiler_observation(node)),
                (templates::PH_RESULT, &execution_result(node)),
            ],
        );
        out.push_str(&block);
    }
    Ok(out)
}

/// "Latest attempt" section for the focus node followed by the history.
pub fn render_window(
    window: &ContextWindow,
    tree: &SearchTree,
    templates: &Templates,
) -> Result<String, WindowError> {
    let parts = templates.frame_parts()?;
    let focus = tree.get(window.focus)?;
    let mut out = templates::fill(
        &parts.latest,
        &[(templates::PH_FOCUS, &focus_text(focus, templates)?)],
    );
    out.push_str(&render_history(window, tree, templates)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::fixtures::example_tree;
    use crate::tree::EvaluationOutcome;

    fn ids(v: &[usize]) -> BTreeSet<NodeId> {
        v.iter().copied().map(NodeId).collect()
    }

    fn rng() -> SearchRng {
        SearchRng::seed_from_u64(11)
    }

    #[test]
    fn plan_window_examples() {
        let t = example_tree();
        let w = build_plan_window(&t, NodeId(1), 2, 5, &mut rng()).unwrap();
        assert_eq!(w.mandatory, ids(&[0, 1]));
        assert_eq!(w.members, vec![NodeId(3), NodeId(4), NodeId(5)]);
        assert!(!w.cap_applied);

        let fresh = SearchTree::new("r", EvaluationOutcome::success(1.0).unwrap()).unwrap();
        let w = build_plan_window(&fresh, NodeId(0), 2, 5, &mut rng()).unwrap();
        assert_eq!(w.mandatory, ids(&[0]));
        assert!(w.members.is_empty());

        let w = build_plan_window(&t, NodeId(5), 2, 5, &mut rng()).unwrap();
        assert_eq!(w.members, vec![NodeId(1), NodeId(3)]);
    }

    #[test]
    fn code_window_examples() {
        let t = example_tree();
        let w = build_code_window(&t, NodeId(1), 5, &mut rng()).unwrap();
        assert_eq!(w.members, vec![NodeId(3), NodeId(4), NodeId(5)]);
        let w = build_code_window(&t, NodeId(3), 5, &mut rng()).unwrap();
        assert!(w.members.is_empty());
        let w = build_code_window(&t, NodeId(2), 5, &mut rng()).unwrap();
        assert_eq!(w.members, vec![NodeId(3), NodeId(4), NodeId(5)]);
    }

    #[test]
    fn debug_window_examples() {
        let t = example_tree();
        assert_eq!(
            build_debug_window(&t, NodeId(2), 5, &mut rng())
                .unwrap()
                .members,
            vec![NodeId(1)]
        );
        assert_eq!(
            build_debug_window(&t, NodeId(3), 5, &mut rng())
                .unwrap()
                .members,
            vec![NodeId(4)]
        );
        assert!(build_debug_window(&t, NodeId(5), 5, &mut rng())
            .unwrap()
            .members
            .is_empty());
        assert!(matches!(
            build_debug_window(&t, NodeId(0), 5, &mut rng()),
            Err(WindowError::DebugRoot)
        ));
    }

    #[test]
    fn cap_boundaries() {
        let m = ids(&[0, 1]);
        let (kept, applied) = apply_cap(&m, &ids(&[2, 3, 4]), 5, &mut rng()).unwrap();
        assert_eq!((kept.len(), applied), (3, false));
        let (kept, applied) = apply_cap(&m, &BTreeSet::new(), 5, &mut rng()).unwrap();
        assert!(kept.is_empty() && !applied);
        let (kept, applied) = apply_cap(&m, &ids(&[2, 3, 4, 5, 6, 7]), 5, &mut rng()).unwrap();
        assert_eq!(kept.len(), 3);
        assert!(applied);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            apply_cap(&m, &ids(&[2]), 1, &mut rng()),
            Err(WindowError::CapTooSmall { .. })
        ));
    }

    #[test]
    fn cap_sampling_is_uniform() {
        // each of 6 elements kept with probability 3/6
        let m = ids(&[0, 1]);
        let opt = ids(&[2, 3, 4, 5, 6, 7]);
        let mut r = SearchRng::seed_from_u64(99);
        let mut counts = [0usize; 8];
        let trials = 10_000;
        for _ in 0..trials {
            for id in apply_cap(&m, &opt, 5, &mut r).unwrap().0 {
                counts[id.0] += 1;
            }
        }
        for c in &counts[2..] {
            let f = *c as f64 / trials as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn truncation_keeps_tail() {
        let long: String = "x".repeat(LOG_TAIL_CHARS) + "TAIL";
        let t = truncate_log(&long);
        assert!(t.starts_with("[... 4 characters elided ...]\n"));
        assert!(t.ends_with("TAIL"));
        assert_eq!(truncate_log("short"), "short");
        let multibyte: String = "é".repeat(LOG_TAIL_CHARS + 1);
        assert!(truncate_log(&multibyte).ends_with('é'));
    }

    #[test]
    fn render_empty_and_numbered() {
        let t = example_tree();
        let tpl = Templates::builtin();
        let w = build_debug_window(&t, NodeId(5), 5, &mut rng()).unwrap();
        let text = render_window(&w, &t, &tpl).unwrap();
        assert!(text.starts_with(
            "Here is your latest attempt:\nk5\n\n**Compiler Observation**\n(no output)"
        ));
        assert!(!text.contains("#1"));

        let w = build_debug_window(&t, NodeId(1), 5, &mut rng()).unwrap();
        let text = render_window(&w, &t, &tpl).unwrap();
        assert!(text.contains("**Kernel Source Code #1**\nk2\n"));
        assert!(!text.contains("#2"));

        let w = build_code_window(&t, NodeId(1), 5, &mut rng()).unwrap();
        let text = render_history(&w, &t, &tpl).unwrap();
        let p1 = text.find("**Kernel Source Code #1**\nk3").unwrap();
        let p2 = text.find("**Kernel Source Code #2**\nk4").unwrap();
        let p3 = text.find("**Kernel Source Code #3**\nk5").unwrap();
        assert!(p1 < p2 && p2 < p3);
        assert!(text.contains("**Kernel Execuation Result**\nCompiled but incorrect.\nmismatch"));
        assert!(text.contains("Compiled and correct. Runtime: 80.0000 ms"));
    }
}
