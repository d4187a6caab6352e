use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tree::{NewNode, NodeId, NodeSource, NodeStatus, SearchTree, TreeError};
use crate::analysis::{self, classify_error, normalize_code, split_blocks, ErrorKind, Phase};
use crate::llm::{render_prompt, Candidate, GatewayError, LlmGateway, SamplingParams, TemplateName};
use crate::model::{join_cells, AgentConfig, StepSpec};
use crate::sandbox::{replay, ExecutionOutcome, SandboxError, SandboxFactory};

/// Phrase every look-ahead prompt carries.
pub const LOOKAHEAD_MARKER: &str = "Write one fenced code block for each of the following steps";

#[derive(Debug, Error)]
pub enum ExpandError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error("committed prefix no longer executes: cell {cell} failed with `{final_line}`")]
    PrefixBroken { cell: usize, final_line: String },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckedCandidate {
    pub code: String,
    pub prior_p: f64,
    pub outcome: ExecutionOutcome,
}

/// Expansion result, computed without touching the tree; `children` carry
/// pre-assigned ids and go to [`SearchTree::attach`] unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub parent: NodeId,
    pub step_index: i64,
    /// Non-empty candidates returned by the model.
    pub sampled: usize,
    /// Candidates actually run, best prior first.
    pub checked: Vec<CheckedCandidate>,
    pub children: Vec<NewNode>,
}

impl Expansion {
    pub fn survivors(&self) -> usize {
        self.children
            .iter()
            .filter(|c| c.status != NodeStatus::TerminalFail)
            .count()
    }

    /// Highest-prior failing candidate.
    pub fn best_failure(&self) -> Option<&CheckedCandidate> {
        self.checked.iter().find(|c| !c.outcome.passed())
    }
}

pub(crate) fn candidate_code(text: &str) -> String {
    let cells = split_blocks(text);
    if cells.is_empty() {
        String::new()
    } else {
        join_cells(cells.iter().map(String::as_str))
    }
}

/// Runs `prefix` then `cells` in a fresh session and returns the outcomes of
/// `cells` only.
fn run_after_prefix(
    sandbox: &dyn SandboxFactory,
    prefix: &[&str],
    cells: &[&str],
    timeout: Duration,
) -> Result<Result<Vec<ExecutionOutcome>, (usize, ExecutionOutcome)>, SandboxError> {
    let all: Vec<&str> = prefix.iter().chain(cells).copied().collect();
    let mut outcomes = replay(sandbox, &all, timeout)?;
    if let Some(i) = outcomes[..prefix.len()].iter().position(|o| !o.passed()) {
        return Ok(Err((i, outcomes.swap_remove(i))));
    }
    Ok(Ok(outcomes.split_off(prefix.len())))
}

/// Checks one candidate cell on top of the node's program.
pub fn check_candidate(
    sandbox: &dyn SandboxFactory,
    prefix: &[&str],
    code: &str,
    timeout: Duration,
) -> Result<ExecutionOutcome, ExpandError> {
    if let Err(e) = analysis::parse_check(code) {
        let etype = "SyntaxError";
        let mut outcome = ExecutionOutcome::synthetic_failure(etype, &e.message, ErrorKind::Syntax);
        outcome.error_class = Some(classify_error(etype, &e.message, Phase::Parse));
        return Ok(outcome);
    }
    match run_after_prefix(sandbox, prefix, &[code], timeout)? {
        Ok(mut outs) => Ok(outs.pop().expect("one cell ran")),
        Err((cell, o)) => Err(ExpandError::PrefixBroken {
            cell,
            final_line: o.final_line(),
        }),
    }
}

/// Samples have already been drawn; this filters them by execution, keeps
/// at most `k_top` survivors by prior and, when none survive, one failing
/// exemplar with Q = -1.
pub fn plan_expansion(
    tree: &SearchTree,
    parent: NodeId,
    step_index: i64,
    last_step: bool,
    candidates: &[Candidate],
    sandbox: &dyn SandboxFactory,
    cfg: &AgentConfig,
) -> Result<Expansion, ExpandError> {
    let parent_node = tree.node(parent)?;
    if parent_node.status.is_terminal() {
        return Err(TreeError::TerminalParent(parent).into());
    }
    let prefix = tree.program_cells(parent)?;
    let timeout = Duration::from_millis(cfg.cell_timeout_ms);

    // one entry per distinct normalized cell, keeping the best prior
    let mut distinct: Vec<(String, String, f64, usize)> = Vec::new();
    let mut sampled = 0;
    for (rank, cand) in candidates.iter().enumerate() {
        let code = candidate_code(&cand.text);
        if code.trim().is_empty() {
            continue;
        }
        sampled += 1;
        let prior = cand.seq_prior.clamp(f64::MIN_POSITIVE, 1.0);
        let key = normalize_code(&code);
        match distinct.iter_mut().find(|d| d.0 == key) {
            Some(d) if prior > d.2 => d.2 = prior,
            Some(_) => {}
            None => distinct.push((key, code, prior, rank)),
        }
    }
    distinct.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.3.cmp(&b.3)));

    let mut checked = Vec::new();
    let mut survivors = 0;
    for (_, code, prior, _) in distinct {
        if survivors == cfg.k_top {
            break;
        }
        let outcome = check_candidate(sandbox, &prefix, &code, timeout)?;
        if outcome.passed() {
            survivors += 1;
        }
        checked.push(CheckedCandidate {
            code,
            prior_p: prior,
            outcome,
        });
    }

    let next = tree.next_id().0;
    let mut children: Vec<NewNode> = checked
        .iter()
        .filter(|c| c.outcome.passed())
        .enumerate()
        .map(|(i, c)| NewNode {
            id: NodeId(next + i as u64),
            step_index,
            code: c.code.clone(),
            prior_p: c.prior_p,
            status: if last_step {
                NodeStatus::TerminalPass
            } else {
                NodeStatus::Unexpanded
            },
            value_q: 0.0,
            source: NodeSource::Generated,
            outcome: Some(c.outcome.clone()),
        })
        .collect();
    if children.is_empty() {
        if let Some(fail) = checked.iter().find(|c| !c.outcome.passed()) {
            children.push(NewNode {
                id: NodeId(next),
                step_index,
                code: fail.code.clone(),
                prior_p: fail.prior_p,
                status: NodeStatus::TerminalFail,
                value_q: -1.0,
                source: NodeSource::Generated,
                outcome: Some(fail.outcome.clone()),
            });
        }
    }
    Ok(Expansion {
        parent,
        step_index,
        sampled,
        checked,
        children,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub node: NodeId,
    pub reward: f64,
    /// Look-ahead cells generated and run.
    pub generated: usize,
    pub passed: usize,
    /// The continuation repeated the node's own cell.
    pub overlap: bool,
}

pub fn lookahead_prompt(library: &str, program: &str, steps: &[String]) -> String {
    let mut body = String::new();
    if !program.trim().is_empty() {
        body.push_str("Here is the previous code:\n");
        body.push_str(program.trim_end());
        body.push('\n');
    }
    body.push_str(LOOKAHEAD_MARKER);
    body.push_str(", in order:\n");
    for (i, s) in steps.iter().enumerate() {
        body.push_str(&format!("{}. {}\n", i + 1, s.trim()));
    }
    render_prompt(TemplateName::Inference, &[("library", library), ("prompt", body.trim_end())])
        .expect("inference slots are fixed")
}

/// Scores a node by a one-shot multi-step continuation: the fraction of
/// generated cells that execute on top of the node's program.
pub fn evaluate(
    tree: &SearchTree,
    node: NodeId,
    remaining: &[String],
    library: &str,
    llm: &LlmGateway,
    sandbox: &dyn SandboxFactory,
    cfg: &AgentConfig,
) -> Result<Evaluation, EvalError> {
    let n = tree.node(node)?;
    let horizon = cfg.lookahead_steps.unwrap_or(usize::MAX).min(remaining.len());
    if horizon == 0 {
        // nothing left to look ahead at; the node's program already runs
        return Ok(Evaluation {
            node,
            reward: 1.0,
            generated: 0,
            passed: 0,
            overlap: false,
        });
    }
    let program = tree.program(node)?;
    let prompt = lookahead_prompt(library, &program, &remaining[..horizon]);
    let text = llm
        .complete(&prompt, SamplingParams::from(cfg), 1)?
        .into_iter()
        .next()
        .map(|c| c.text)
        .unwrap_or_default();
    let mut cells = split_blocks(&text);
    cells.truncate(horizon);
    if cells.is_empty() {
        return Ok(Evaluation {
            node,
            reward: 0.0,
            generated: 0,
            passed: 0,
            overlap: false,
        });
    }
    let continuation = join_cells(cells.iter().map(String::as_str));
    if normalize_code(&continuation) == normalize_code(&n.code) {
        return Ok(Evaluation {
            node,
            reward: 1.0,
            generated: cells.len(),
            passed: cells.len(),
            overlap: true,
        });
    }
    let prefix = tree.program_cells(node)?;
    let cell_refs: Vec<&str> = cells.iter().map(String::as_str).collect();
    let passed = match run_after_prefix(
        sandbox,
        &prefix,
        &cell_refs,
        Duration::from_millis(cfg.cell_timeout_ms),
    )? {
        Ok(outs) => outs.iter().filter(|o| o.passed()).count(),
        // the node's own program failing means nothing downstream can count
        Err(_) => 0,
    };
    Ok(Evaluation {
        node,
        reward: passed as f64 / cells.len() as f64,
        generated: cells.len(),
        passed,
        overlap: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    pub offending: NodeId,
    /// Subtree roots to remove: the offending node and its failed siblings.
    pub removed: Vec<NodeId>,
    /// Working-step position of the new definition step.
    pub insert_at: i64,
    pub names: Vec<String>,
    pub instruction: String,
}

impl SurgeryPlan {
    pub fn step_spec(&self, library_hints: Vec<String>) -> StepSpec {
        let mut step = StepSpec::new(self.insert_at.max(0) as usize, self.instruction.clone());
        step.library_hints = library_hints;
        step
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SurgeryDecision {
    Apply(SurgeryPlan),
    NoOp { reason: String },
}

/// Instruction for a step that defines `names` ahead of `next_instruction`.
pub fn definition_instruction(next_instruction: &str, names: &[String]) -> String {
    let next = next_instruction.trim().trim_end_matches('.');
    let head = render_prompt(TemplateName::PrependTask, &[("next_instruction", next)])
        .expect("prepend slots are fixed");
    format!("{head} {}", names.join(", "))
}

/// Plans removal of the subtree at `node` (which reads `names` before
/// defining them) and a definition step inserted before its step.
pub fn surgery_undefined(
    tree: &SearchTree,
    node: NodeId,
    names: &BTreeSet<String>,
    prefix_bound: &BTreeSet<String>,
    step_instruction: &str,
) -> Result<SurgeryDecision, TreeError> {
    let n = tree.node(node)?;
    if node == tree.root() {
        return Err(TreeError::RemoveRoot);
    }
    if names.is_empty() {
        return Ok(SurgeryDecision::NoOp {
            reason: "no undefined names".into(),
        });
    }
    let missing: Vec<String> = names.difference(prefix_bound).cloned().collect();
    if missing.is_empty() {
        let listed = names.iter().cloned().collect::<Vec<_>>().join(", ");
        tracing::warn!(names = %listed, "surgery skipped: names already defined in the prefix");
        return Ok(SurgeryDecision::NoOp {
            reason: format!("already defined in the prefix: {listed}"),
        });
    }
    let parent = n.parent.expect("non-root");
    let mut removed = vec![node];
    for sib in tree.children(parent)? {
        if sib.id != node && sib.step_index == n.step_index && sib.status == NodeStatus::TerminalFail {
            removed.push(sib.id);
        }
    }
    removed.sort();
    Ok(SurgeryDecision::Apply(SurgeryPlan {
        offending: node,
        removed,
        insert_at: n.step_index,
        instruction: definition_instruction(step_instruction, &missing),
        names: missing,
    }))
}

impl SearchTree {
    /// Removes the planned subtrees and renumbers later steps.
    pub fn apply_surgery(&mut self, removed: &[NodeId], insert_at: i64) -> Result<(), TreeError> {
        for id in removed {
            if self.contains(*id) {
                self.remove_subtree(*id)?;
            }
        }
        self.shift_steps(insert_at, 1);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_step_text() {
        let text = definition_instruction(
            "Filter the fishing effort by date.",
            &["endDate".to_string(), "startDate".to_string()],
        );
        assert!(text.starts_with("Defining the undefined variables for the next step task: Filter the fishing effort by date."));
        assert!(text.ends_with("in this step: endDate, startDate"));
    }

    #[test]
    fn lookahead_prompt_shape() {
        let p = lookahead_prompt("geemap", "x = 1\n", &["a".into(), "b".into()]);
        assert!(p.contains(LOOKAHEAD_MARKER));
        assert!(p.contains("Here is the previous code:\nx = 1\n"));
        assert!(p.contains("1. a\n2. b"));
    }

    #[test]
    fn surgery_decisions() {
        let mut t = SearchTree::new();
        t.attach(
            t.root(),
            vec![
                NewNode {
                    id: NodeId(1),
                    step_index: 0,
                    code: "y = startDate".into(),
                    prior_p: 1.0,
                    status: NodeStatus::TerminalFail,
                    value_q: -1.0,
                    source: NodeSource::Generated,
                    outcome: None,
                },
                NewNode {
                    id: NodeId(2),
                    step_index: 0,
                    code: "y = startDate + 1".into(),
                    prior_p: 0.5,
                    status: NodeStatus::TerminalFail,
                    value_q: -1.0,
                    source: NodeSource::Generated,
                    outcome: None,
                },
            ],
        )
        .unwrap();
        let names: BTreeSet<String> = ["startDate".to_string()].into();
        let none = BTreeSet::new();
        assert!(matches!(
            surgery_undefined(&t, NodeId(1), &BTreeSet::new(), &none, "use it").unwrap(),
            SurgeryDecision::NoOp { .. }
        ));
        assert!(matches!(
            surgery_undefined(&t, NodeId(1), &names, &names, "use it").unwrap(),
            SurgeryDecision::NoOp { .. }
        ));
        let SurgeryDecision::Apply(plan) = surgery_undefined(&t, NodeId(1), &names, &none, "use it").unwrap() else {
            panic!()
        };
        assert_eq!(plan.removed, vec![NodeId(1), NodeId(2)]);
        assert_eq!(plan.insert_at, 0);
        t.apply_surgery(&plan.removed, plan.insert_at).unwrap();
        assert_eq!(t.len(), 1);
        t.check_invariants().unwrap();
    }
}
