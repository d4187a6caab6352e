//! Independent reference implementations and generators shared by the
//! property tests and the acceptance target.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use stepforge_core::harness::LabelSet;
use stepforge_core::mcts::{select, NewNode, NodeSource, Selection};
use stepforge_core::{AgentConfig, NodeId, NodeStatus, SearchTree};

/// Label pairs as bit masks over a universe of `k` labels.
#[derive(Debug, Clone)]
pub struct MaskPairs {
    pub k: usize,
    pub pairs: Vec<(u8, u8)>,
}

pub fn mask_pairs() -> impl Strategy<Value = MaskPairs> {
    (1usize..=8).prop_flat_map(|k| {
        let limit = ((1u16 << k) - 1) as u8;
        prop::collection::vec((0..=limit, 0..=limit), 1..=50).prop_map(move |pairs| MaskPairs { k, pairs })
    })
}

fn label(i: usize) -> String {
    format!("mod.f{i}")
}

fn set(mask: u8, k: usize) -> LabelSet {
    LabelSet::new((0..k).filter(|i| mask >> i & 1 == 1).map(label))
}

impl MaskPairs {
    /// (Y, Z) label sets.
    pub fn label_sets(&self) -> Vec<(LabelSet, LabelSet)> {
        self.pairs.iter().map(|&(y, z)| (set(y, self.k), set(z, self.k))).collect()
    }
}

/// Accuracy, recall (over |Z|), precision (over |Y|), F1 and Hamming loss by
/// per-label indicator counting. Zero denominators follow the empty-set rule.
pub fn brute_metrics(m: &MaskPairs) -> [f64; 5] {
    let n = m.pairs.len() as f64;
    let mut a = 0.0;
    let mut r = 0.0;
    let mut p = 0.0;
    let mut f = 0.0;
    let mut wrong = 0usize;
    let mut used = 0u8;
    for &(y, z) in &m.pairs {
        used |= y | z;
        let (mut inter, mut uni, mut ny, mut nz) = (0usize, 0usize, 0usize, 0usize);
        for l in 0..m.k {
            let iy = y >> l & 1 == 1;
            let iz = z >> l & 1 == 1;
            inter += (iy && iz) as usize;
            uni += (iy || iz) as usize;
            ny += iy as usize;
            nz += iz as usize;
            wrong += (iy != iz) as usize;
        }
        let term = |num: usize, den: usize| -> f64 {
            if den > 0 {
                num as f64 / den as f64
            } else if ny == 0 && nz == 0 {
                1.0
            } else {
                0.0
            }
        };
        a += term(inter, uni);
        r += term(inter, nz);
        p += term(inter, ny);
        f += term(2 * inter, ny + nz);
    }
    let k_used = used.count_ones() as f64;
    let hamming = if k_used == 0.0 { 0.0 } else { wrong as f64 / (k_used * n) };
    [a / n, r / n, p / n, f / n, hamming]
}

/// One step of a random tree workload.
#[derive(Debug, Clone)]
pub enum TreeOp {
    Select,
    /// Expand the node picked by `pick` with children (prior, failed).
    Expand { pick: usize, children: Vec<(f64, bool)> },
    Backprop { pick: usize, reward: f64 },
    Surgery { pick: usize },
}

pub fn tree_op() -> impl Strategy<Value = TreeOp> {
    prop_oneof![
        1 => Just(TreeOp::Select),
        3 => (any::<usize>(), prop::collection::vec((0.01f64..=1.0, prop::bool::weighted(0.2)), 1..4))
            .prop_map(|(pick, children)| TreeOp::Expand { pick, children }),
        3 => (any::<usize>(), -1.5f64..1.5).prop_map(|(pick, reward)| TreeOp::Backprop { pick, reward }),
        1 => any::<usize>().prop_map(|pick| TreeOp::Surgery { pick }),
    ]
}

pub fn tree_ops() -> impl Strategy<Value = Vec<TreeOp>> {
    prop::collection::vec(tree_op(), 1..40)
}

fn pick(tree: &SearchTree, i: usize, filter: impl Fn(NodeId, NodeStatus) -> bool) -> Option<NodeId> {
    let ids: Vec<NodeId> = tree.nodes().filter(|n| filter(n.id, n.status)).map(|n| n.id).collect();
    (!ids.is_empty()).then(|| ids[i % ids.len()])
}

/// Structural check written without the tree's own validator: breadth-first
/// reachability from the root, parent/child agreement, bounded Q.
pub fn check_tree(tree: &SearchTree) -> Result<(), String> {
    let root = tree.root();
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([root]);
    while let Some(id) = queue.pop_front() {
        if !seen.insert(id) {
            return Err(format!("{id} visited twice"));
        }
        let node = tree.get(id).ok_or(format!("{id} dangling"))?;
        if !(-1.0..=1.0).contains(&node.value_q) {
            return Err(format!("{id} has Q {}", node.value_q));
        }
        for c in &node.children {
            let child = tree.get(*c).ok_or(format!("child {c} of {id} missing"))?;
            if child.parent != Some(id) {
                return Err(format!("{c} does not point back to {id}"));
            }
            if child.visits_v > node.visits_v {
                return Err(format!("{c} has more visits than its parent {id}"));
            }
            queue.push_back(*c);
        }
    }
    if seen.len() != tree.len() {
        return Err(format!("{} of {} nodes reachable", seen.len(), tree.len()));
    }
    tree.check_invariants().map_err(|e| e.to_string())
}

/// Applies `ops` to a fresh tree, checking structure and Q-monotonicity
/// after every operation.
pub fn run_tree_ops(ops: &[TreeOp]) -> Result<(), String> {
    let cfg = AgentConfig::default();
    let mut tree = SearchTree::new();
    let mut last_q: BTreeMap<NodeId, f64> = BTreeMap::new();
    for op in ops {
        match op {
            TreeOp::Select => match select(&tree, &cfg) {
                Selection::Node(id) => {
                    let status = tree.get(id).ok_or("selected a missing node")?.status;
                    if status != NodeStatus::Unexpanded {
                        return Err(format!("selected {id} with status {status:?}"));
                    }
                }
                Selection::Exhausted => {
                    if tree.nodes().any(|n| n.status == NodeStatus::Unexpanded && reachable_live(&tree, n.id)) {
                        return Err("exhausted with an unexpanded node left".into());
                    }
                }
            },
            TreeOp::Expand { pick: i, children } => {
                let Some(parent) = pick(&tree, *i, |_, s| !s.is_terminal()) else { continue };
                let step = tree.get(parent).unwrap().step_index + 1;
                let base = tree.next_id().0;
                let nodes = children
                    .iter()
                    .enumerate()
                    .map(|(j, &(prior, failed))| NewNode {
                        id: NodeId(base + j as u64),
                        step_index: step,
                        code: format!("c{base}_{j} = {j}"),
                        prior_p: prior,
                        status: if failed { NodeStatus::TerminalFail } else { NodeStatus::Unexpanded },
                        value_q: if failed { -1.0 } else { 0.0 },
                        source: NodeSource::Generated,
                        outcome: None,
                    })
                    .collect();
                tree.attach(parent, nodes).map_err(|e| e.to_string())?;
            }
            TreeOp::Backprop { pick: i, reward } => {
                let Some(id) = pick(&tree, *i, |_, _| true) else { continue };
                tree.backpropagate(id, *reward).map_err(|e| e.to_string())?;
            }
            TreeOp::Surgery { pick: i } => {
                let root = tree.root();
                let Some(id) = pick(&tree, *i, |n, _| n != root) else { continue };
                let removed = tree.remove_subtree(id).map_err(|e| e.to_string())?;
                for r in removed {
                    if tree.contains(r) {
                        return Err(format!("{r} survived surgery"));
                    }
                    last_q.remove(&r);
                }
            }
        }
        check_tree(&tree)?;
        for n in tree.nodes() {
            if let Some(prev) = last_q.insert(n.id, n.value_q) {
                if n.value_q < prev {
                    return Err(format!("Q of {} fell from {prev} to {}", n.id, n.value_q));
                }
            }
        }
    }
    Ok(())
}

/// True when no terminal node lies on the path from the root to `id`.
fn reachable_live(tree: &SearchTree, id: NodeId) -> bool {
    tree.path(id)
        .map(|p| p.iter().all(|n| !tree.get(*n).unwrap().status.is_terminal()))
        .unwrap_or(false)
}
