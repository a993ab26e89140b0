//! Adapted epsilon-greedy node selection.
//!
//! Two eligibility rules sit on top of the canonical rule:
//! the root stops being selectable once it has `n_root` direct children, and
//! a node with more than `n_child` children that all failed is pruned.
//! Exploration draws uniformly from eligible leaves; exploitation takes the
//! lowest score over every eligible node.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SearchRng;
use crate::tree::{NodeId, SearchTree};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyParams {
    pub epsilon: f64,
    pub n_root: usize,
    pub n_child: usize,
    pub seed: u64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            n_root: 5,
            n_child: 3,
            seed: 0,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if self.n_root == 0 || self.n_child == 0 {
            return Err("n_root and n_child must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ineligible {
    RootThrottled,
    DeadBranch,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EligibilityReport {
    pub eligible: BTreeSet<NodeId>,
    pub ineligible_reasons: BTreeMap<NodeId, Ineligible>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Explore,
    Exploit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub node: NodeId,
    pub branch: Branch,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("no node is eligible for selection")]
    Exhausted,
}

pub fn is_root_throttled(tree: &SearchTree, params: &PolicyParams) -> bool {
    tree.children(tree.root()).map_or(0, |c| c.len()) >= params.n_root
}

pub fn is_dead_branch(tree: &SearchTree, id: NodeId, params: &PolicyParams) -> bool {
    let Ok(children) = tree.children(id) else {
        return false;
    };
    children.len() > params.n_child && children.iter().all(|c| tree.score_of(*c).is_infinite())
}

pub fn eligible(tree: &SearchTree, params: &PolicyParams) -> EligibilityReport {
    let mut report = EligibilityReport::default();
    let root_throttled = is_root_throttled(tree, params);
    for id in tree.ids() {
        // throttling takes precedence when both apply to the root
        if id == tree.root() && root_throttled {
            report
                .ineligible_reasons
                .insert(id, Ineligible::RootThrottled);
        } else if is_dead_branch(tree, id, params) {
            report.ineligible_reasons.insert(id, Ineligible::DeadBranch);
        } else {
            report.eligible.insert(id);
        }
    }
    report
}

fn leaves_of(tree: &SearchTree, report: &EligibilityReport) -> BTreeSet<NodeId> {
    let leaves: BTreeSet<NodeId> = report
        .eligible
        .iter()
        .copied()
        .filter(|id| tree.children(*id).is_ok_and(|c| c.is_empty()))
        .collect();
    if leaves.is_empty() {
        report.eligible.clone()
    } else {
        leaves
    }
}

/// Eligible childless nodes; the whole eligible set when there are none.
pub fn expandable_leaves(tree: &SearchTree, params: &PolicyParams) -> BTreeSet<NodeId> {
    leaves_of(tree, &eligible(tree, params))
}

/// One selection step. Consumes one uniform for the branch decision and, on
/// the exploration branch, one index draw for the leaf.
pub fn select(
    tree: &SearchTree,
    params: &PolicyParams,
    rng: &mut SearchRng,
) -> Result<Selection, PolicyError> {
    let report = eligible(tree, params);
    if report.eligible.is_empty() {
        return Err(PolicyError::Exhausted);
    }
    if rng.uniform() < params.epsilon {
        let leaves: Vec<NodeId> = leaves_of(tree, &report).into_iter().collect();
        let node = leaves[rng.index(leaves.len())];
        Ok(Selection {
            node,
            branch: Branch::Explore,
        })
    } else {
        let node = report
            .eligible
            .iter()
            .copied()
            .min_by(|a, b| {
                tree.score_of(*a)
                    .total_cmp(&tree.score_of(*b))
                    .then(a.cmp(b))
            })
            .expect("eligible set is nonempty");
        Ok(Selection {
            node,
            branch: Branch::Exploit,
        })
    }
}
