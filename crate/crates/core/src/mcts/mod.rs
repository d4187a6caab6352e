//! Tree search over program cells: p-UCB selection, execution-filtered
//! expansion, look-ahead evaluation, max-backpropagation and surgery.

mod search;
mod tree;

use std::cmp::Ordering;

use crate::model::AgentConfig;

pub use search::{
    evaluate, lookahead_prompt, plan_expansion, surgery_undefined, CheckedCandidate, EvalError,
    Evaluation, ExpandError, Expansion, SurgeryDecision, SurgeryPlan, LOOKAHEAD_MARKER,
};
pub(crate) use search::{candidate_code, check_candidate};
pub use tree::{NewNode, NodeId, NodeSource, NodeStatus, SearchNode, SearchTree, TreeError};

/// Exploration weight: `ln((v0 + c_base + 1) / c_base) + c`.
pub fn beta(v0: u64, c_base: f64, c: f64) -> f64 {
    ((v0 as f64 + c_base + 1.0) / c_base).ln() + c
}

/// `Q + beta(parent) * p * sqrt(ln parent) / (1 + v)`.
pub fn pucb_score(child: &SearchNode, parent_visits: u64, cfg: &AgentConfig) -> f64 {
    pucb(child.value_q, child.prior_p, child.visits_v, parent_visits, cfg.c_base, cfg.c)
}

pub fn pucb(q: f64, p: f64, v: u64, parent_visits: u64, c_base: f64, c: f64) -> f64 {
    let parent_visits = parent_visits.max(1);
    let explore = beta(parent_visits, c_base, c) * p * (parent_visits as f64).ln().sqrt() / (1.0 + v as f64);
    q + explore
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Node(NodeId),
    /// Every branch below the start node is terminal.
    Exhausted,
}

/// Children of `id` ordered best-first by p-UCB, ties to the lowest id.
pub fn ranked_children(tree: &SearchTree, id: NodeId, cfg: &AgentConfig) -> Vec<NodeId> {
    let Some(node) = tree.get(id) else {
        return Vec::new();
    };
    let mut scored: Vec<(f64, NodeId)> = node
        .children
        .iter()
        .filter_map(|c| tree.get(*c))
        .map(|c| (pucb_score(c, node.visits_v, cfg), c.id))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

fn descend(tree: &SearchTree, id: NodeId, cfg: &AgentConfig) -> Option<NodeId> {
    let node = tree.get(id)?;
    match node.status {
        NodeStatus::Unexpanded => Some(id),
        NodeStatus::TerminalPass | NodeStatus::TerminalFail => None,
        NodeStatus::Expanded => ranked_children(tree, id, cfg)
            .into_iter()
            .find_map(|c| descend(tree, c, cfg)),
    }
}

/// Walks down by argmax p-UCB until an unexpanded node. A branch whose
/// leaves are all terminal is skipped in favour of the next best sibling.
pub fn select(tree: &SearchTree, cfg: &AgentConfig) -> Selection {
    select_from(tree, tree.root(), cfg)
}

pub fn select_from(tree: &SearchTree, start: NodeId, cfg: &AgentConfig) -> Selection {
    descend(tree, start, cfg).map_or(Selection::Exhausted, Selection::Node)
}

fn commit_order(a: &SearchNode, b: &SearchNode) -> Ordering {
    a.value_q
        .total_cmp(&b.value_q)
        .then(a.prior_p.total_cmp(&b.prior_p))
        .then(b.id.cmp(&a.id))
}

/// Best passing child of `parent` for `step`: max Q, then prior, then lowest id.
pub fn choose_commit(tree: &SearchTree, parent: NodeId, step: i64) -> Option<NodeId> {
    tree.children(parent)
        .ok()?
        .into_iter()
        .filter(|c| c.step_index == step && c.status != NodeStatus::TerminalFail)
        .max_by(|a, b| commit_order(a, b))
        .map(|c| c.id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AgentConfig {
        AgentConfig::default()
    }

    #[test]
    fn beta_fixtures() {
        assert!((beta(0, 10.0, 4.0) - (1.1f64.ln() + 4.0)).abs() < 1e-12);
        assert!((beta(0, 10.0, 4.0) - 4.09531).abs() < 1e-5);
        assert!((beta(10, 10.0, 4.0) - 4.74194).abs() < 1e-5);
        assert!(beta(0, 1e12, 0.0).abs() < 1e-11);
    }

    #[test]
    fn pucb_fixture() {
        let score = pucb(0.5, 0.6, 2, 10, 10.0, 4.0);
        assert!((score - 1.93911).abs() < 1e-5, "{score}");
        assert_eq!(pucb(0.3, 0.9, 0, 1, 10.0, 4.0), 0.3);
        assert!((pucb(0.3, 1e-12, 0, 50, 10.0, 4.0) - 0.3).abs() < 1e-10);
    }

    fn tree_with(stats: &[(f64, f64, u64)]) -> SearchTree {
        let mut t = SearchTree::new();
        let children = stats
            .iter()
            .enumerate()
            .map(|(i, (q, p, _))| NewNode {
                id: NodeId(1 + i as u64),
                step_index: 0,
                code: format!("x = {i}"),
                prior_p: *p,
                status: NodeStatus::Unexpanded,
                value_q: *q,
                source: NodeSource::Generated,
                outcome: None,
            })
            .collect();
        t.attach(t.root(), children).unwrap();
        for (i, (_, _, v)) in stats.iter().enumerate() {
            for _ in 0..*v {
                t.backpropagate(NodeId(1 + i as u64), -1.0).unwrap();
            }
        }
        t
    }

    #[test]
    fn fewer_visits_wins() {
        let t = tree_with(&[(0.0, 0.5, 3), (0.0, 0.5, 1)]);
        assert_eq!(select(&t, &cfg()), Selection::Node(NodeId(2)));
    }

    #[test]
    fn single_node_and_ties() {
        let t = SearchTree::new();
        assert_eq!(select(&t, &cfg()), Selection::Node(t.root()));
        let t = tree_with(&[(0.0, 0.5, 0), (0.0, 0.5, 0)]);
        assert_eq!(select(&t, &cfg()), Selection::Node(NodeId(1)));
    }

    #[test]
    fn exhausted_branches_skipped() {
        let mut t = SearchTree::new();
        t.attach(
            t.root(),
            vec![
                NewNode {
                    id: NodeId(1),
                    step_index: 0,
                    code: "bad".into(),
                    prior_p: 1.0,
                    status: NodeStatus::TerminalFail,
                    value_q: -1.0,
                    source: NodeSource::Generated,
                    outcome: None,
                },
                NewNode {
                    id: NodeId(2),
                    step_index: 0,
                    code: "ok".into(),
                    prior_p: 0.1,
                    status: NodeStatus::TerminalPass,
                    value_q: 1.0,
                    source: NodeSource::Generated,
                    outcome: None,
                },
            ],
        )
        .unwrap();
        assert_eq!(select(&t, &cfg()), Selection::Exhausted);
    }

    #[test]
    fn commit_rule() {
        let t = tree_with(&[(0.5, 0.2, 0), (0.5, 0.9, 0), (0.1, 1.0, 0)]);
        assert_eq!(choose_commit(&t, t.root(), 0), Some(NodeId(2)));
        let t = tree_with(&[(0.5, 0.4, 0), (0.5, 0.4, 0)]);
        assert_eq!(choose_commit(&t, t.root(), 0), Some(NodeId(1)));
        assert_eq!(choose_commit(&t, t.root(), 1), None);
    }
}
