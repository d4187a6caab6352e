//! Event-sourced run state. The engine changes a run only by appending
//! events, and [`RunState::apply`] is the single fold, so replaying a log
//! rebuilds exactly the live state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::FixHint;
use crate::mcts::{NewNode, NodeId, NodeSource, SearchTree, TreeError};
use crate::model::{AgentConfig, ProgramCell, SolutionProgram, StepOrigin, StepSpec, TaskSpec};
use crate::retriever::RetrievedItem;
use crate::sandbox::ExecutionOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Auto,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Paused,
    Finished,
    Failed,
    Cancelled,
}

impl RunStatus {
    pub fn is_final(self) -> bool {
        matches!(self, RunStatus::Finished | RunStatus::Failed | RunStatus::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanEdit {
    pub step_index: usize,
    pub edited_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub instruction: String,
    pub failed_code: String,
    pub outcome: Option<ExecutionOutcome>,
    pub attempts_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionState {
    Pending,
    Resolved,
    Abandoned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub run_id: String,
    pub step_index: usize,
    pub report: InterventionReport,
    pub state: InterventionState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<HumanEdit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    FailedAttempt,
    HumanEdit,
    FailedEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: HistoryKind,
    pub code: String,
    /// Rendered traceback of the failure, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<FixHint>,
}

/// A step of the task as it is being worked: the original steps plus any
/// definition steps inserted by surgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingStep {
    pub spec: StepSpec,
    pub origin: StepOrigin,
    pub started: bool,
    pub attempts_used: u32,
    pub history: Vec<HistoryEntry>,
    pub retrieved: Vec<RetrievedItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    RunCreated {
        task: TaskSpec,
        cfg: AgentConfig,
        mode: RunMode,
    },
    StepStarted {
        step: usize,
        origin: StepOrigin,
        instruction: String,
    },
    Retrieval {
        step: usize,
        query: String,
        items: Vec<RetrievedItem>,
    },
    Execution {
        step: usize,
        source: NodeSource,
        code: String,
        outcome: ExecutionOutcome,
    },
    NodeExpanded {
        parent: NodeId,
        step: usize,
        sampled: usize,
        children: Vec<NewNode>,
    },
    Reward {
        node: NodeId,
        reward: f64,
        generated: usize,
        passed: usize,
        overlap: bool,
    },
    Attempt {
        step: usize,
        attempt: u32,
        /// False when the failure was routed to surgery instead of the budget.
        counted: bool,
        passed: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failed_code: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outcome: Option<ExecutionOutcome>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hint: Option<FixHint>,
    },
    Surgery {
        step: usize,
        offending: NodeId,
        removed: Vec<NodeId>,
        names: Vec<String>,
        inserted: StepSpec,
    },
    InterventionRequested {
        request: InterventionRequest,
    },
    InterventionResolved {
        step: usize,
        edit: HumanEdit,
        node: NewNode,
    },
    StepCommitted {
        step: usize,
        node: NodeId,
    },
    RunFinished {
        status: RunStatus,
        completed_steps: usize,
        total_steps: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
}

impl EventPayload {
    pub fn kind(&self) -> &'static str {
        match self {
            EventPayload::RunCreated { .. } => "run_created",
            EventPayload::StepStarted { .. } => "step_started",
            EventPayload::Retrieval { .. } => "retrieval",
            EventPayload::Execution { .. } => "execution",
            EventPayload::NodeExpanded { .. } => "node_expanded",
            EventPayload::Reward { .. } => "reward",
            EventPayload::Attempt { .. } => "attempt",
            EventPayload::Surgery { .. } => "surgery",
            EventPayload::InterventionRequested { .. } => "intervention_requested",
            EventPayload::InterventionResolved { .. } => "intervention_resolved",
            EventPayload::StepCommitted { .. } => "step_committed",
            EventPayload::RunFinished { .. } => "run_finished",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    pub seq: u64,
    pub timestamp_ms: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
}

impl RunEvent {
    /// One compact JSON record, newline-terminated.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("event serializes");
        s.push('\n');
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("event log is empty")]
    EmptyLog,
    #[error("first event must be run_created, got {0}")]
    NotGenesis(&'static str),
    #[error("event for run `{found}` applied to run `{expected}`")]
    WrongRun { expected: String, found: String },
    #[error("expected seq {expected}, got {found}")]
    Sequence { expected: u64, found: u64 },
    #[error("run already {0:?}")]
    Closed(RunStatus),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("inconsistent event: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub task: TaskSpec,
    pub cfg: AgentConfig,
    pub mode: RunMode,
    pub status: RunStatus,
    pub steps: Vec<WorkingStep>,
    pub current_step: usize,
    pub frontier: NodeId,
    pub tree: SearchTree,
    pub cells: Vec<ProgramCell>,
    pub completed_steps: usize,
    pub pending: Option<InterventionRequest>,
    pub resolved: Vec<InterventionRequest>,
    /// Human edits, oldest first; they are shown to later prompts.
    pub edit_context: Vec<String>,
    /// Surgeries per original step index.
    pub surgeries: BTreeMap<usize, u32>,
    pub next_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

impl RunState {
    /// State right after a `run_created` event.
    pub fn genesis(event: &RunEvent) -> Result<Self, StateError> {
        let EventPayload::RunCreated { task, cfg, mode } = &event.payload else {
            return Err(StateError::NotGenesis(event.payload.kind()));
        };
        if event.seq != 0 {
            return Err(StateError::Sequence {
                expected: 0,
                found: event.seq,
            });
        }
        let steps = task
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| WorkingStep {
                spec: s.clone(),
                origin: StepOrigin::Original(i),
                started: false,
                attempts_used: 0,
                history: Vec::new(),
                retrieved: Vec::new(),
            })
            .collect();
        let tree = SearchTree::new();
        Ok(Self {
            run_id: event.run_id.clone(),
            task: task.clone(),
            cfg: cfg.clone(),
            mode: *mode,
            status: RunStatus::Running,
            steps,
            current_step: 0,
            frontier: tree.root(),
            tree,
            cells: Vec::new(),
            completed_steps: 0,
            pending: None,
            resolved: Vec::new(),
            edit_context: Vec::new(),
            surgeries: BTreeMap::new(),
            next_seq: 1,
            finish_reason: None,
        })
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a RunEvent>) -> Result<Self, StateError> {
        let mut iter = events.into_iter();
        let first = iter.next().ok_or(StateError::EmptyLog)?;
        let mut state = Self::genesis(first)?;
        for e in iter {
            state.apply(e)?;
        }
        Ok(state)
    }

    pub fn total_steps(&self) -> usize {
        self.task.steps.len()
    }

    pub fn current(&self) -> Option<&WorkingStep> {
        self.steps.get(self.current_step)
    }

    fn step_mut(&mut self, step: usize) -> Result<&mut WorkingStep, StateError> {
        self.steps
            .get_mut(step)
            .ok_or_else(|| StateError::Invalid(format!("no working step {step}")))
    }

    fn expect_current(&self, step: usize) -> Result<(), StateError> {
        if step != self.current_step {
            return Err(StateError::Invalid(format!(
                "event for step {step} while step {} is current",
                self.current_step
            )));
        }
        Ok(())
    }

    pub fn apply(&mut self, event: &RunEvent) -> Result<(), StateError> {
        if event.run_id != self.run_id {
            return Err(StateError::WrongRun {
                expected: self.run_id.clone(),
                found: event.run_id.clone(),
            });
        }
        if event.seq != self.next_seq {
            return Err(StateError::Sequence {
                expected: self.next_seq,
                found: event.seq,
            });
        }
        if self.status.is_final() {
            return Err(StateError::Closed(self.status));
        }
        match &event.payload {
            EventPayload::RunCreated { .. } => {
                return Err(StateError::Invalid("duplicate run_created".into()))
            }
            EventPayload::StepStarted { step, .. } => {
                self.expect_current(*step)?;
                self.step_mut(*step)?.started = true;
            }
            EventPayload::Retrieval { step, items, .. } => {
                self.step_mut(*step)?.retrieved = items.clone();
            }
            EventPayload::Execution {
                step,
                source,
                code,
                outcome,
            } => {
                if *source == NodeSource::Human && !outcome.passed() {
                    let entry = HistoryEntry {
                        kind: HistoryKind::FailedEdit,
                        code: code.clone(),
                        error: outcome.traceback.as_ref().map(|t| t.render()),
                        hint: None,
                    };
                    self.step_mut(*step)?.history.push(entry);
                    if let Some(p) = self.pending.as_mut() {
                        p.report.failed_code = code.clone();
                        p.report.outcome = Some(outcome.clone());
                    }
                }
            }
            EventPayload::NodeExpanded {
                parent, children, ..
            } => {
                self.tree.attach(*parent, children.clone())?;
            }
            EventPayload::Reward { node, reward, .. } => {
                self.tree.backpropagate(*node, *reward)?;
            }
            EventPayload::Attempt {
                step,
                counted,
                passed,
                failed_code,
                outcome,
                hint,
                ..
            } => {
                self.expect_current(*step)?;
                let ws = self.step_mut(*step)?;
                if *counted {
                    ws.attempts_used += 1;
                    if !*passed {
                        ws.history.push(HistoryEntry {
                            kind: HistoryKind::FailedAttempt,
                            code: failed_code.clone().unwrap_or_default(),
                            error: outcome
                                .as_ref()
                                .and_then(|o| o.traceback.as_ref())
                                .map(|t| t.render()),
                            hint: hint.clone(),
                        });
                    }
                }
            }
            EventPayload::Surgery {
                step,
                removed,
                inserted,
                ..
            } => {
                self.expect_current(*step)?;
                self.tree.apply_surgery(removed, *step as i64)?;
                let origin = self.steps[*step].origin;
                if let StepOrigin::Original(i) = origin {
                    *self.surgeries.entry(i).or_default() += 1;
                }
                self.steps.insert(
                    *step,
                    WorkingStep {
                        spec: inserted.clone(),
                        origin: StepOrigin::Inserted,
                        started: false,
                        attempts_used: 0,
                        history: Vec::new(),
                        retrieved: Vec::new(),
                    },
                );
                // the displaced step is re-approached from scratch
                self.steps[*step + 1].started = false;
                for (i, ws) in self.steps.iter_mut().enumerate() {
                    ws.spec.index = i;
                }
            }
            EventPayload::InterventionRequested { request } => {
                if self.pending.is_some() {
                    return Err(StateError::Invalid("an intervention is already pending".into()));
                }
                self.expect_current(request.step_index)?;
                self.pending = Some(request.clone());
                self.status = RunStatus::Paused;
            }
            EventPayload::InterventionResolved { step, edit, node } => {
                let Some(mut request) = self.pending.take() else {
                    return Err(StateError::Invalid("no pending intervention".into()));
                };
                if request.step_index != *step {
                    return Err(StateError::Invalid(format!(
                        "edit for step {step} while step {} is pending",
                        request.step_index
                    )));
                }
                self.tree.attach(self.frontier, vec![node.clone()])?;
                request.state = InterventionState::Resolved;
                request.edit = Some(edit.clone());
                self.resolved.push(request);
                self.edit_context.push(edit.edited_code.clone());
                self.step_mut(*step)?.history.push(HistoryEntry {
                    kind: HistoryKind::HumanEdit,
                    code: edit.edited_code.clone(),
                    error: None,
                    hint: None,
                });
                self.status = RunStatus::Running;
            }
            EventPayload::StepCommitted { step, node } => {
                self.expect_current(*step)?;
                let n = self.tree.node(*node)?;
                if n.parent != Some(self.frontier) {
                    return Err(StateError::Invalid(format!(
                        "committed node {node} is not a child of the frontier {}",
                        self.frontier
                    )));
                }
                let code = n.code.clone();
                self.tree.mark_committed(*node)?;
                let origin = self.steps[*step].origin;
                self.cells.push(ProgramCell {
                    step_index: *step,
                    origin,
                    code,
                    outcome_ref: Some(node.0),
                });
                if matches!(origin, StepOrigin::Original(_)) {
                    self.completed_steps += 1;
                }
                self.frontier = *node;
                self.current_step = step + 1;
            }
            EventPayload::RunFinished { status, reason, .. } => {
                if !status.is_final() {
                    return Err(StateError::Invalid(format!("run_finished with status {status:?}")));
                }
                self.status = *status;
                self.finish_reason = reason.clone();
                if let Some(mut p) = self.pending.take() {
                    p.state = InterventionState::Abandoned;
                    self.resolved.push(p);
                }
            }
        }
        self.next_seq += 1;
        Ok(())
    }

    pub fn program(&self) -> SolutionProgram {
        SolutionProgram {
            task_id: self.task.id.clone(),
            cells: self.cells.clone(),
            completed_steps: self.completed_steps,
            total_steps: self.total_steps(),
        }
    }

    /// Canonical serialization used to compare live and replayed state.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }
}

/// Destination for a run's events.
pub trait EventSink: Send {
    fn record(&mut self, event: &RunEvent) -> io::Result<()>;
}

impl EventSink for Vec<RunEvent> {
    fn record(&mut self, event: &RunEvent) -> io::Result<()> {
        self.push(event.clone());
        Ok(())
    }
}

/// Append-only JSON-lines log, flushed per event.
pub struct FileSink {
    out: BufWriter<File>,
}

impl FileSink {
    pub fn append(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl EventSink for FileSink {
    fn record(&mut self, event: &RunEvent) -> io::Result<()> {
        self.out.write_all(event.to_line().as_bytes())?;
        self.out.flush()
    }
}

/// Reads a JSON-lines event log. A torn final line (crash mid-write) is dropped.
pub fn read_log(path: &Path) -> io::Result<Vec<RunEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<io::Result<_>>()?;
    let mut events = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match RunEvent::parse_line(line) {
            Ok(e) => events.push(e),
            Err(_) if i == last => break,
            Err(e) => return Err(io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn created() -> RunEvent {
        RunEvent {
            run_id: "r1".into(),
            seq: 0,
            timestamp_ms: 1,
            payload: EventPayload::RunCreated {
                task: TaskSpec::from_instructions("t", &[], ["a", "b"]),
                cfg: AgentConfig::default(),
                mode: RunMode::Auto,
            },
        }
    }

    fn ev(seq: u64, payload: EventPayload) -> RunEvent {
        RunEvent {
            run_id: "r1".into(),
            seq,
            timestamp_ms: 1,
            payload,
        }
    }

    #[test]
    fn event_line_shape() {
        let line = created().to_line();
        assert!(line.starts_with(r#"{"run_id":"r1","seq":0,"timestamp_ms":1,"kind":"run_created","payload":"#));
        assert_eq!(RunEvent::parse_line(&line).unwrap(), created());
    }

    #[test]
    fn sequence_and_run_checks() {
        let mut s = RunState::genesis(&created()).unwrap();
        let started = EventPayload::StepStarted {
            step: 0,
            origin: StepOrigin::Original(0),
            instruction: "a".into(),
        };
        assert!(matches!(s.apply(&ev(2, started.clone())), Err(StateError::Sequence { .. })));
        let mut other = ev(1, started.clone());
        other.run_id = "r2".into();
        assert!(matches!(s.apply(&other), Err(StateError::WrongRun { .. })));
        s.apply(&ev(1, started)).unwrap();
        assert!(s.steps[0].started);
        assert!(matches!(RunState::genesis(&ev(0, EventPayload::StepCommitted { step: 0, node: NodeId(1) })), Err(StateError::NotGenesis(_))));
    }

    #[test]
    fn finish_closes_run() {
        let mut s = RunState::genesis(&created()).unwrap();
        s.apply(&ev(
            1,
            EventPayload::RunFinished {
                status: RunStatus::Cancelled,
                completed_steps: 0,
                total_steps: 2,
                reason: None,
            },
        ))
        .unwrap();
        assert_eq!(s.status, RunStatus::Cancelled);
        let again = ev(
            2,
            EventPayload::StepStarted {
                step: 0,
                origin: StepOrigin::Original(0),
                instruction: "a".into(),
            },
        );
        assert_eq!(s.apply(&again), Err(StateError::Closed(RunStatus::Cancelled)));
    }

    #[test]
    fn torn_tail_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut sink = FileSink::append(&path).unwrap();
        sink.record(&created()).unwrap();
        drop(sink);
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"run_id\":\"r1\",\"se")
            .unwrap();
        assert_eq!(read_log(&path).unwrap(), vec![created()]);
    }
}
