//! The step-wise refinement agent: per-step tree search at the committed
//! frontier, repair prompts with fix hints, variable-definition surgery and
//! human intervention once the attempt budget runs out.

mod prompt;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::analysis::{
    attribute_receivers, bound_names, find_undefined_names, missing_attribute, suggest_fix,
    undefined_names_in_message, ErrorKind, FixHint, FixHintKind,
};
use crate::llm::{GatewayError, LlmGateway, SamplingParams};
use crate::mcts::{
    candidate_code, check_candidate, choose_commit, evaluate, plan_expansion, surgery_undefined,
    ExpandError, Expansion, NewNode, NodeId, NodeSource, NodeStatus, SurgeryDecision,
};
use crate::model::{AgentConfig, ModelError, StepOrigin, TaskSpec};
use crate::retriever::{should_retrieve, Embedder, EmbeddingIndex, RetrieverError};
use crate::run::{
    EventPayload, EventSink, InterventionReport, InterventionState, RunEvent, RunState, RunStatus,
    StateError,
};
use crate::sandbox::{ExecutionOutcome, SandboxError, SandboxFactory};

pub use crate::run::{HumanEdit, InterventionRequest, RunMode};
pub use prompt::{chat_history_context, library_slot, step_prompt};

/// Default cap on definition-step insertions per original step.
pub const DEFAULT_MAX_SURGERIES: u32 = 2;

#[derive(Clone)]
pub struct Retrieval {
    pub index: Arc<EmbeddingIndex>,
    pub embedder: Arc<dyn Embedder>,
}

/// Everything a run needs from outside.
#[derive(Clone)]
pub struct Deps {
    pub llm: LlmGateway,
    pub sandbox: Arc<dyn SandboxFactory>,
    pub retrieval: Option<Retrieval>,
    pub known_libraries: Vec<String>,
    pub max_surgeries: u32,
}

impl Deps {
    pub fn new(llm: LlmGateway, sandbox: Arc<dyn SandboxFactory>) -> Self {
        Self {
            llm,
            sandbox,
            retrieval: None,
            known_libraries: crate::retriever::KNOWN_LIBRARIES.iter().map(|s| s.to_string()).collect(),
            max_surgeries: DEFAULT_MAX_SURGERIES,
        }
    }

    pub fn with_retrieval(mut self, index: Arc<EmbeddingIndex>, embedder: Arc<dyn Embedder>) -> Self {
        self.retrieval = Some(Retrieval { index, embedder });
        self
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error("event log write failed: {0}")]
    Sink(#[from] std::io::Error),
    #[error("run is {0:?}")]
    NotRunning(RunStatus),
    #[error("no intervention is pending")]
    NotPaused,
    #[error("edit targets step {found} but step {expected} is awaiting intervention")]
    StepMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepResult {
    Committed { step: usize, node: NodeId },
    /// A definition step was inserted in front of the current step.
    Restructured { step: usize },
    Failed { step: usize },
    Paused { step: usize },
    Cancelled,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EditOutcome {
    Accepted { node: NodeId },
    Rejected { outcome: ExecutionOutcome },
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct Agent {
    deps: Arc<Deps>,
    state: RunState,
    sink: Box<dyn EventSink>,
    cancel: Arc<AtomicBool>,
}

impl Agent {
    /// Starts a run and writes its `run_created` event.
    pub fn create(
        run_id: impl Into<String>,
        task: TaskSpec,
        cfg: AgentConfig,
        mode: RunMode,
        deps: Arc<Deps>,
        mut sink: Box<dyn EventSink>,
    ) -> Result<Self, AgentError> {
        task.validate()?;
        cfg.validate()?;
        let event = RunEvent {
            run_id: run_id.into(),
            seq: 0,
            timestamp_ms: now_ms(),
            payload: EventPayload::RunCreated { task, cfg, mode },
        };
        let state = RunState::genesis(&event)?;
        sink.record(&event)?;
        Ok(Self {
            deps,
            state,
            sink,
            cancel: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Rebuilds a run from its log; `sink` continues that log.
    pub fn resume(events: &[RunEvent], deps: Arc<Deps>, sink: Box<dyn EventSink>) -> Result<Self, AgentError> {
        Ok(Self {
            deps,
            state: RunState::replay(events)?,
            sink,
            cancel: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    /// Setting the flag stops the run at the next check.
    pub fn cancel_flag(&self) -> Arc<AtomicBool> {
        self.cancel.clone()
    }

    fn emit(&mut self, payload: EventPayload) -> Result<(), AgentError> {
        let event = RunEvent {
            run_id: self.state.run_id.clone(),
            seq: self.state.next_seq,
            timestamp_ms: now_ms(),
            payload,
        };
        self.state.apply(&event)?;
        self.sink.record(&event)?;
        Ok(())
    }

    fn finish(&mut self, status: RunStatus, reason: Option<String>) -> Result<(), AgentError> {
        self.emit(EventPayload::RunFinished {
            status,
            completed_steps: self.state.completed_steps,
            total_steps: self.state.total_steps(),
            reason,
        })
    }

    /// Cancels immediately, abandoning any pending intervention.
    pub fn cancel(&mut self) -> Result<(), AgentError> {
        if self.state.status.is_final() {
            return Err(AgentError::NotRunning(self.state.status));
        }
        self.finish(RunStatus::Cancelled, Some("cancelled".into()))
    }

    /// Works steps until the run ends or pauses for a human. An
    /// infrastructure error fails the run before being returned.
    pub fn drive(&mut self) -> Result<RunStatus, AgentError> {
        while self.state.status == RunStatus::Running {
            if self.state.current_step >= self.state.steps.len() {
                self.finish(RunStatus::Finished, None)?;
                break;
            }
            if let Err(e) = self.attempt_step() {
                if !self.state.status.is_final() {
                    self.finish(RunStatus::Failed, Some(e.to_string()))?;
                }
                return Err(e);
            }
        }
        Ok(self.state.status)
    }

    fn cancelled(&mut self) -> Result<bool, AgentError> {
        if self.cancel.load(Ordering::SeqCst) && !self.state.status.is_final() {
            self.finish(RunStatus::Cancelled, Some("cancelled".into()))?;
            return Ok(true);
        }
        Ok(false)
    }

    fn start_step(&mut self, step: usize) -> Result<(), AgentError> {
        let ws = &self.state.steps[step];
        self.emit(EventPayload::StepStarted {
            step,
            origin: ws.origin,
            instruction: ws.spec.instruction.clone(),
        })?;
        let deps = self.deps.clone();
        let Some(retrieval) = &deps.retrieval else {
            return Ok(());
        };
        let ws = &self.state.steps[step];
        if !should_retrieve(&ws.spec, &deps.known_libraries) {
            return Ok(());
        }
        let mut query = ws.spec.instruction.clone();
        if self.state.cfg.query_includes_prior_code {
            let program = self.state.tree.program(self.state.frontier).unwrap_or_default();
            if !program.trim().is_empty() {
                query.push('\n');
                query.push_str(&program);
            }
        }
        let filter: BTreeSet<String> = if ws.spec.library_hints.is_empty() {
            self.state.task.libraries.iter().cloned().collect()
        } else {
            ws.spec.library_hints.iter().cloned().collect()
        };
        let filter = (!filter.is_empty()).then_some(filter);
        let items = retrieval.index.query(
            &query,
            filter.as_ref(),
            self.state.cfg.k_retrieve,
            retrieval.embedder.as_ref(),
        )?;
        self.emit(EventPayload::Retrieval { step, query, items })
    }

    fn expand_once(&self, step: usize, candidates: &[crate::llm::Candidate]) -> Result<Expansion, ExpandError> {
        let last = step + 1 == self.state.steps.len();
        plan_expansion(
            &self.state.tree,
            self.state.frontier,
            step as i64,
            last,
            candidates,
            self.deps.sandbox.as_ref(),
            &self.state.cfg,
        )
    }

    /// Member names of the receiver of a missing attribute, read from a
    /// session that has run the prefix and the failed cell.
    fn introspect_receiver(&self, code: &str, outcome: &ExecutionOutcome) -> Option<Vec<String>> {
        let tb = outcome.traceback.as_ref()?;
        let (_, attr) = missing_attribute(&tb.message)?;
        let receivers = attribute_receivers(code, &attr).ok()?;
        if receivers.is_empty() {
            return None;
        }
        let timeout = Duration::from_millis(self.state.cfg.cell_timeout_ms);
        let prefix = self.state.tree.program_cells(self.state.frontier).ok()?;
        let mut session = self.deps.sandbox.open().ok()?;
        for cell in prefix.iter().copied().chain([code]) {
            if session.execute(cell, timeout).is_err() {
                session.close();
                return None;
            }
        }
        let found = receivers.iter().find_map(|r| session.introspect_attrs(r).ok());
        session.close();
        found
    }

    fn undefined_names(&self, code: &str, outcome: &ExecutionOutcome) -> (BTreeSet<String>, BTreeSet<String>) {
        let program = self.state.tree.program(self.state.frontier).unwrap_or_default();
        let prefix_bound = bound_names(&program).unwrap_or_default();
        let mut names: BTreeSet<String> = outcome
            .traceback
            .as_ref()
            .map(|t| undefined_names_in_message(&t.message))
            .unwrap_or_default()
            .into_iter()
            .collect();
        if let Ok(found) = find_undefined_names(code, &prefix_bound) {
            names.extend(found);
        }
        (names, prefix_bound)
    }

    /// Routes an undefined-variable failure to surgery when allowed.
    fn try_surgery(
        &mut self,
        step: usize,
        attempt: u32,
        exemplar: NodeId,
        code: &str,
        outcome: &ExecutionOutcome,
    ) -> Result<bool, AgentError> {
        let StepOrigin::Original(orig) = self.state.steps[step].origin else {
            return Ok(false);
        };
        if self.state.surgeries.get(&orig).copied().unwrap_or(0) >= self.deps.max_surgeries {
            return Ok(false);
        }
        let (names, prefix_bound) = self.undefined_names(code, outcome);
        let instruction = self.state.steps[step].spec.instruction.clone();
        let plan = match surgery_undefined(&self.state.tree, exemplar, &names, &prefix_bound, &instruction)
            .map_err(StateError::from)?
        {
            SurgeryDecision::Apply(plan) => plan,
            SurgeryDecision::NoOp { .. } => return Ok(false),
        };
        let hints = self.state.steps[step].spec.library_hints.clone();
        self.emit(EventPayload::Attempt {
            step,
            attempt,
            counted: false,
            passed: false,
            failed_code: Some(code.to_string()),
            outcome: Some(outcome.clone()),
            hint: Some(FixHint {
                kind: FixHintKind::DefineVariables,
                payload: plan.names.join(", "),
            }),
        })?;
        self.emit(EventPayload::Surgery {
            step,
            offending: plan.offending,
            removed: plan.removed.clone(),
            names: plan.names.clone(),
            inserted: plan.step_spec(hints),
        })?;
        Ok(true)
    }

    /// Works the current step until it commits, restructures, runs out of
    /// attempts or is cancelled.
    pub fn attempt_step(&mut self) -> Result<StepResult, AgentError> {
        if self.state.status != RunStatus::Running {
            return Err(AgentError::NotRunning(self.state.status));
        }
        let step = self.state.current_step;
        if step >= self.state.steps.len() {
            return Err(StateError::Invalid("no step left to attempt".into()).into());
        }
        if !self.state.steps[step].started {
            self.start_step(step)?;
        }
        let params = SamplingParams::from(&self.state.cfg);
        loop {
            if self.cancelled()? {
                return Ok(StepResult::Cancelled);
            }
            let used = self.state.steps[step].attempts_used;
            if used >= self.state.cfg.max_attempts {
                return self.exhausted(step);
            }
            let attempt = used + 1;
            let prompt = step_prompt(&self.state, step);
            let candidates = self.deps.llm.complete(&prompt, params, self.state.cfg.n_samples)?;

            let expansion = match self.expand_once(step, &candidates) {
                Err(ExpandError::Sandbox(first)) => {
                    tracing::warn!(step, error = %first, "sandbox failed during expansion, retrying");
                    match self.expand_once(step, &candidates) {
                        Err(ExpandError::Sandbox(e)) => {
                            let outcome = ExecutionOutcome::synthetic_failure("SandboxError", &e.to_string(), ErrorKind::General);
                            self.emit(EventPayload::Attempt {
                                step,
                                attempt,
                                counted: true,
                                passed: false,
                                failed_code: candidates.first().map(|c| candidate_code(&c.text)),
                                hint: Some(suggest_fix(&outcome, None)),
                                outcome: Some(outcome),
                            })?;
                            continue;
                        }
                        other => other?,
                    }
                }
                other => other?,
            };

            for c in &expansion.checked {
                self.emit(EventPayload::Execution {
                    step,
                    source: NodeSource::Generated,
                    code: c.code.clone(),
                    outcome: c.outcome.clone(),
                })?;
            }
            let children = expansion.children.clone();
            if !children.is_empty() {
                self.emit(EventPayload::NodeExpanded {
                    parent: expansion.parent,
                    step,
                    sampled: expansion.sampled,
                    children: children.clone(),
                })?;
            }

            if expansion.survivors() > 0 {
                self.score_children(step, &children)?;
                self.emit(EventPayload::Attempt {
                    step,
                    attempt,
                    counted: true,
                    passed: true,
                    failed_code: None,
                    outcome: None,
                    hint: None,
                })?;
                let node = choose_commit(&self.state.tree, self.state.frontier, step as i64)
                    .ok_or_else(|| StateError::Invalid("survivors but nothing to commit".into()))?;
                self.emit(EventPayload::StepCommitted { step, node })?;
                return Ok(StepResult::Committed { step, node });
            }

            let Some(failure) = expansion.best_failure().cloned() else {
                let outcome = ExecutionOutcome::synthetic_failure("EmptyCompletion", "the model returned no code", ErrorKind::General);
                self.emit(EventPayload::Attempt {
                    step,
                    attempt,
                    counted: true,
                    passed: false,
                    failed_code: Some(String::new()),
                    hint: Some(suggest_fix(&outcome, None)),
                    outcome: Some(outcome),
                })?;
                continue;
            };
            if failure.outcome.error_kind() == Some(ErrorKind::UndefinedVariable) {
                let exemplar = children[0].id;
                if self.try_surgery(step, attempt, exemplar, &failure.code, &failure.outcome)? {
                    return Ok(StepResult::Restructured { step });
                }
            }
            let members = if failure.outcome.error_kind() == Some(ErrorKind::ApiHallucination) {
                self.introspect_receiver(&failure.code, &failure.outcome)
            } else {
                None
            };
            let hint = suggest_fix(&failure.outcome, members.as_deref());
            self.emit(EventPayload::Attempt {
                step,
                attempt,
                counted: true,
                passed: false,
                failed_code: Some(failure.code.clone()),
                outcome: Some(failure.outcome.clone()),
                hint: Some(hint),
            })?;
        }
    }

    /// Look-ahead rewards for new passing children, in id order.
    fn score_children(&mut self, step: usize, children: &[NewNode]) -> Result<(), AgentError> {
        let remaining: Vec<String> = self.state.steps[step + 1..]
            .iter()
            .map(|s| s.spec.instruction.clone())
            .collect();
        let library = library_slot(&self.state, step);
        for child in children.iter().filter(|c| c.status != NodeStatus::TerminalFail) {
            let eval = evaluate(
                &self.state.tree,
                child.id,
                &remaining,
                &library,
                &self.deps.llm,
                self.deps.sandbox.as_ref(),
                &self.state.cfg,
            );
            let (reward, generated, passed, overlap) = match eval {
                Ok(e) => (e.reward, e.generated, e.passed, e.overlap),
                Err(e) => {
                    tracing::warn!(node = %child.id, error = %e, "look-ahead failed, scoring 0");
                    (0.0, 0, 0, false)
                }
            };
            self.emit(EventPayload::Reward {
                node: child.id,
                reward,
                generated,
                passed,
                overlap,
            })?;
        }
        Ok(())
    }

    fn exhausted(&mut self, step: usize) -> Result<StepResult, AgentError> {
        match self.state.mode {
            RunMode::Auto => {
                self.finish(RunStatus::Failed, Some(format!("step {step} exhausted its attempts")))?;
                Ok(StepResult::Failed { step })
            }
            RunMode::Human => {
                let ws = &self.state.steps[step];
                let last = ws.history.last();
                let outcome = self
                    .state
                    .tree
                    .children(self.state.frontier)
                    .ok()
                    .and_then(|cs| {
                        cs.into_iter()
                            .rev()
                            .find(|c| c.step_index == step as i64 && c.status == NodeStatus::TerminalFail)
                            .and_then(|c| c.outcome.clone())
                    });
                let request = InterventionRequest {
                    run_id: self.state.run_id.clone(),
                    step_index: step,
                    report: InterventionReport {
                        instruction: ws.spec.instruction.clone(),
                        failed_code: last.map(|e| e.code.clone()).unwrap_or_default(),
                        outcome,
                        attempts_used: ws.attempts_used,
                    },
                    state: InterventionState::Pending,
                    edit: None,
                };
                self.emit(EventPayload::InterventionRequested { request })?;
                Ok(StepResult::Paused { step })
            }
        }
    }

    /// Applies a human edit to the paused step. A passing edit commits the
    /// step and resumes the run; a failing one keeps it paused.
    pub fn apply_edit(&mut self, edit: HumanEdit) -> Result<EditOutcome, AgentError> {
        if self.state.status != RunStatus::Paused {
            return Err(if self.state.status.is_final() {
                AgentError::NotRunning(self.state.status)
            } else {
                AgentError::NotPaused
            });
        }
        let pending = self.state.pending.as_ref().ok_or(AgentError::NotPaused)?;
        if pending.step_index != edit.step_index {
            return Err(AgentError::StepMismatch {
                expected: pending.step_index,
                found: edit.step_index,
            });
        }
        let step = edit.step_index;
        let code = if edit.edited_code.contains("```") {
            candidate_code(&edit.edited_code)
        } else {
            edit.edited_code.clone()
        };
        let prefix = self.state.tree.program_cells(self.state.frontier).map_err(StateError::from)?;
        let outcome = check_candidate(
            self.deps.sandbox.as_ref(),
            &prefix,
            &code,
            Duration::from_millis(self.state.cfg.cell_timeout_ms),
        )?;
        self.emit(EventPayload::Execution {
            step,
            source: NodeSource::Human,
            code: code.clone(),
            outcome: outcome.clone(),
        })?;
        if !outcome.passed() {
            return Ok(EditOutcome::Rejected { outcome });
        }
        let last = step + 1 == self.state.steps.len();
        let node = NewNode {
            id: self.state.tree.next_id(),
            step_index: step as i64,
            code: code.clone(),
            prior_p: 1.0,
            status: if last {
                NodeStatus::TerminalPass
            } else {
                NodeStatus::Unexpanded
            },
            value_q: 0.0,
            source: NodeSource::Human,
            outcome: Some(outcome),
        };
        let id = node.id;
        let edit = HumanEdit {
            edited_code: code,
            ..edit
        };
        self.emit(EventPayload::InterventionResolved { step, edit, node })?;
        self.emit(EventPayload::StepCommitted { step, node: id })?;
        Ok(EditOutcome::Accepted { node: id })
    }
}

/// Runs a task to completion in auto mode with an in-memory log.
pub fn run_search(
    task: &TaskSpec,
    cfg: &AgentConfig,
    deps: Arc<Deps>,
) -> Result<(RunState, Vec<RunEvent>), AgentError> {
    let log = Arc::new(std::sync::Mutex::new(Vec::new()));
    let sink = SharedSink(log.clone());
    let mut agent = Agent::create(task.id.clone(), task.clone(), cfg.clone(), RunMode::Auto, deps, Box::new(sink))?;
    agent.drive()?;
    let state = agent.into_state();
    let events = std::mem::take(&mut *log.lock().expect("log lock"));
    Ok((state, events))
}

/// Sink writing into a shared vector, so the caller keeps the log.
#[derive(Clone, Default)]
pub struct SharedSink(pub Arc<std::sync::Mutex<Vec<RunEvent>>>);

impl EventSink for SharedSink {
    fn record(&mut self, event: &RunEvent) -> std::io::Result<()> {
        self.0.lock().expect("log lock").push(event.clone());
        Ok(())
    }
}
