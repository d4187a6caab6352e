//! Fixture builders shared by the criterion benches.

use stepforge_core::harness::LabelSet;
use stepforge_core::mcts::{NewNode, NodeSource};
use stepforge_core::{NodeId, NodeStatus, SearchTree};

/// A full tree of the given depth and branching, with every node visited
/// once and rewards spread over [-1, 1].
pub fn tree(depth: usize, branching: usize) -> SearchTree {
    let mut tree = SearchTree::new();
    let mut level = vec![tree.root()];
    for d in 0..depth {
        let mut next = Vec::new();
        for parent in level {
            let base = tree.next_id().0;
            let children: Vec<NewNode> = (0..branching as u64)
                .map(|i| NewNode {
                    id: NodeId(base + i),
                    step_index: d as i64,
                    code: format!("x_{d}_{i} = {i}"),
                    prior_p: 1.0 / (i as f64 + 2.0),
                    status: NodeStatus::Unexpanded,
                    value_q: 0.0,
                    source: NodeSource::Generated,
                    outcome: None,
                })
                .collect();
            tree.attach(parent, children).expect("attach");
            for i in 0..branching as u64 {
                let id = NodeId(base + i);
                let reward = ((base + i) % 7) as f64 / 3.0 - 1.0;
                tree.backpropagate(id, reward).expect("backprop");
                next.push(id);
            }
        }
        level = next;
    }
    tree
}

/// `n` (gold, predicted) pairs drawn deterministically from a universe of
/// `universe` labels.
pub fn label_pairs(n: usize, universe: usize) -> Vec<(LabelSet, LabelSet)> {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let set = |next: &mut dyn FnMut() -> u64| {
        let mask = next();
        LabelSet::new((0..universe).filter(|b| mask >> b & 1 == 1).map(|b| format!("lib.f{b}")))
    };
    (0..n).map(|_| (set(&mut next), set(&mut next))).collect()
}

/// A notebook-like completion with prose, fenced blocks and comments.
pub fn completion(blocks: usize) -> String {
    let mut out = String::from("Here is the solution.\n");
    for i in 0..blocks {
        out.push_str(&format!(
            "Step {i}:\n```python\n# compute value {i}\nx{i} = compute('a # b', {i})  # trailing\n\n\nprint(x{i})\n```\n"
        ));
    }
    out
}
