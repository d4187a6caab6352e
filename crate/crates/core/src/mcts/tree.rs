use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::join_cells;
use crate::sandbox::ExecutionOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Unexpanded,
    Expanded,
    TerminalPass,
    TerminalFail,
}

impl NodeStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, NodeStatus::TerminalPass | NodeStatus::TerminalFail)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSource {
    #[default]
    Generated,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    /// Working-step index this cell implements; the root is -1.
    pub step_index: i64,
    pub code: String,
    pub prior_p: f64,
    pub visits_v: u64,
    pub value_q: f64,
    pub children: Vec<NodeId>,
    pub status: NodeStatus,
    #[serde(default)]
    pub source: NodeSource,
    #[serde(default)]
    pub committed: bool,
    /// Result of running the node's program (prefix plus this cell).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
}

/// A node to be attached by [`SearchTree::attach`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewNode {
    pub id: NodeId,
    pub step_index: i64,
    pub code: String,
    pub prior_p: f64,
    pub status: NodeStatus,
    pub value_q: f64,
    #[serde(default)]
    pub source: NodeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<ExecutionOutcome>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is terminal and cannot take children")]
    TerminalParent(NodeId),
    #[error("expected next node id {expected}, got {found}")]
    IdOutOfSequence { expected: NodeId, found: NodeId },
    #[error("the root cannot be removed")]
    RemoveRoot,
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    root: NodeId,
    next_id: u64,
    nodes: BTreeMap<NodeId, SearchNode>,
}

impl Default for SearchTree {
    fn default() -> Self {
        Self::new()
    }
}

impl SearchTree {
    pub fn new() -> Self {
        let root = SearchNode {
            id: NodeId(0),
            parent: None,
            step_index: -1,
            code: String::new(),
            prior_p: 1.0,
            // starts at 1 so ln(visits) is defined on the first selection
            visits_v: 1,
            value_q: 0.0,
            children: Vec::new(),
            status: NodeStatus::Unexpanded,
            source: NodeSource::Generated,
            committed: true,
            outcome: None,
        };
        Self {
            root: NodeId(0),
            next_id: 1,
            nodes: BTreeMap::from([(NodeId(0), root)]),
        }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Id the next attached node must carry.
    pub fn next_id(&self) -> NodeId {
        NodeId(self.next_id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn get(&self, id: NodeId) -> Option<&SearchNode> {
        self.nodes.get(&id)
    }

    pub fn node(&self, id: NodeId) -> Result<&SearchNode, TreeError> {
        self.nodes.get(&id).ok_or(TreeError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut SearchNode, TreeError> {
        self.nodes.get_mut(&id).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SearchNode> {
        self.nodes.values()
    }

    pub fn children(&self, id: NodeId) -> Result<Vec<&SearchNode>, TreeError> {
        let node = self.node(id)?;
        Ok(node.children.iter().map(|c| &self.nodes[c]).collect())
    }

    /// Ids from the root down to `id`, inclusive.
    pub fn path(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut path = vec![id];
        let mut cur = self.node(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = self.node(p)?;
        }
        path.reverse();
        Ok(path)
    }

    /// Cells on the root-to-`id` path (the root's empty cell excluded).
    pub fn program_cells(&self, id: NodeId) -> Result<Vec<&str>, TreeError> {
        Ok(self
            .path(id)?
            .into_iter()
            .filter(|n| *n != self.root)
            .map(|n| self.nodes[&n].code.as_str())
            .collect())
    }

    pub fn program(&self, id: NodeId) -> Result<String, TreeError> {
        Ok(join_cells(self.program_cells(id)?))
    }

    pub fn attach(&mut self, parent: NodeId, children: Vec<NewNode>) -> Result<(), TreeError> {
        let p = self.node(parent)?;
        if p.status.is_terminal() {
            return Err(TreeError::TerminalParent(parent));
        }
        for (offset, child) in children.iter().enumerate() {
            let expected = NodeId(self.next_id + offset as u64);
            if child.id != expected {
                return Err(TreeError::IdOutOfSequence {
                    expected,
                    found: child.id,
                });
            }
        }
        self.next_id += children.len() as u64;
        let parent_node = self.node_mut(parent)?;
        parent_node.status = NodeStatus::Expanded;
        parent_node.children.extend(children.iter().map(|c| c.id));
        for c in children {
            self.nodes.insert(
                c.id,
                SearchNode {
                    id: c.id,
                    parent: Some(parent),
                    step_index: c.step_index,
                    code: c.code,
                    prior_p: c.prior_p,
                    visits_v: 0,
                    value_q: c.value_q.clamp(-1.0, 1.0),
                    children: Vec::new(),
                    status: c.status,
                    source: c.source,
                    committed: false,
                    outcome: c.outcome,
                },
            );
        }
        Ok(())
    }

    /// Max-backup of `reward` and one visit, from `id` up to the root.
    pub fn backpropagate(&mut self, id: NodeId, reward: f64) -> Result<(), TreeError> {
        let reward = if reward.is_nan() { -1.0 } else { reward.clamp(-1.0, 1.0) };
        let path = self.path(id)?;
        for n in path {
            let node = self.node_mut(n)?;
            node.value_q = node.value_q.max(reward);
            node.visits_v += 1;
        }
        Ok(())
    }

    pub fn mark_committed(&mut self, id: NodeId) -> Result<(), TreeError> {
        self.node_mut(id)?.committed = true;
        Ok(())
    }

    /// Removes `id` and its descendants; returns the removed ids.
    pub fn remove_subtree(&mut self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        if id == self.root {
            return Err(TreeError::RemoveRoot);
        }
        let parent = self.node(id)?.parent.expect("non-root has a parent");
        let mut removed = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = self.nodes.remove(&n).ok_or(TreeError::UnknownNode(n))?;
            stack.extend(node.children);
            removed.push(n);
        }
        let p = self.node_mut(parent)?;
        p.children.retain(|c| *c != id);
        if p.children.is_empty() && p.status == NodeStatus::Expanded {
            p.status = NodeStatus::Unexpanded;
        }
        removed.sort();
        Ok(removed)
    }

    /// Renumbers steps after a step is inserted at `at`.
    pub fn shift_steps(&mut self, at: i64, by: i64) {
        for node in self.nodes.values_mut() {
            if node.step_index >= at {
                node.step_index += by;
            }
        }
    }

    pub fn check_invariants(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Invariant(m));
        let root = self.node(self.root)?;
        if root.parent.is_some() || root.step_index != -1 || !root.code.is_empty() {
            return bad("root must have no parent, step -1 and empty code".into());
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![self.root];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                return bad(format!("{n} reached twice (cycle or shared child)"));
            }
            let node = self.node(n)?;
            if node.id != n {
                return bad(format!("{n} stored under the wrong key"));
            }
            if !(-1.0..=1.0).contains(&node.value_q) {
                return bad(format!("{n} has Q={} outside [-1, 1]", node.value_q));
            }
            if !(node.prior_p > 0.0 && node.prior_p <= 1.0) {
                return bad(format!("{n} has prior {} outside (0, 1]", node.prior_p));
            }
            for c in &node.children {
                let child = self.node(*c)?;
                if child.parent != Some(n) {
                    return bad(format!("{c} does not point back to parent {n}"));
                }
                if child.visits_v > node.visits_v {
                    return bad(format!("{c} has more visits than its parent {n}"));
                }
                if node.status.is_terminal() {
                    return bad(format!("terminal {n} has children"));
                }
                stack.push(*c);
            }
        }
        if seen.len() != self.nodes.len() {
            return bad(format!(
                "{} of {} nodes unreachable from the root",
                self.nodes.len() - seen.len(),
                self.nodes.len()
            ));
        }
        if let Some(max) = self.nodes.keys().next_back() {
            if max.0 >= self.next_id {
                return bad("next_id is behind the largest node id".into());
            }
        }
        Ok(())
    }

    /// Pretty JSON dump of every node.
    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }
}
