use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{
    label_universe, metric_accuracy, metric_f1, metric_hamming, metric_precision, metric_recall,
    LabelSet, PrConvention,
};
use super::report::{
    AggregateMetrics, MetricsReport, RagMode, ReportRunMode, TaskMetrics, EMPTY_SET_RULE,
    REPORT_SCHEMA_VERSION,
};
use crate::analysis::{extract_call_labels, LabelMode};
use crate::llm::{render_prompt, SamplingParams, TemplateName};
use crate::mcts::{candidate_code, check_candidate};
use crate::model::{AgentConfig, StepOrigin, StepSpec, TaskKind, TaskSpec};
use crate::refine::{Agent, AgentError, Deps, EditOutcome, HumanEdit, RunMode};
use crate::retriever::should_retrieve;
use crate::run::{EventSink, HistoryKind, InterventionState, RunState, RunStatus};

/// What produces code for a task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Solver {
    /// The full search-and-repair agent.
    #[default]
    Agent,
    /// One sample per step, no search and no repair.
    LlmOnly,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub rag: RagMode,
    pub label_mode: LabelMode,
    pub pr: PrConvention,
    pub jobs: usize,
    pub solver: Solver,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rag: RagMode::At0,
            label_mode: LabelMode::Dotted,
            pr: PrConvention::AsPrinted,
            jobs: 1,
            solver: Solver::Agent,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("@3 evaluation needs a retrieval index")]
    NoRetriever,
    #[error("task `{task_id}` step {step} has no gold code")]
    MissingGold { task_id: String, step: usize },
    #[error("malformed edit script at `{path}`: {message}")]
    EditScript { path: String, message: String },
    #[error("cannot read edit script: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEdit {
    pub task_id: String,
    /// Index of the original step the edit answers.
    pub step: usize,
    pub edited_code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Pre-recorded human edits, tried in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditScript {
    pub edits: Vec<ScriptedEdit>,
}

impl EditScript {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| HarnessError::EditScript {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn for_step<'a>(&'a self, task_id: &'a str, step: usize) -> impl Iterator<Item = &'a ScriptedEdit> {
        self.edits
            .iter()
            .filter(move |e| e.task_id == task_id && e.step == step)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MultiTurnMode<'a> {
    Auto,
    HumanScripted(&'a EditScript),
}

/// Fraction of steps in the longest all-passing prefix.
pub fn complete_at_1(outcomes: &[bool]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    let prefix = outcomes.iter().take_while(|p| **p).count();
    prefix as f64 / outcomes.len() as f64
}

/// Splits a multi-turn task into one single-turn task per step, each
/// carrying the gold code of the earlier steps as context.
pub fn convert_multi_to_single(task: &TaskSpec) -> Result<Vec<TaskSpec>, HarnessError> {
    let mut previous: Vec<&str> = Vec::new();
    let mut out = Vec::with_capacity(task.steps.len());
    for step in &task.steps {
        let gold = step.gold_code.as_deref().ok_or_else(|| HarnessError::MissingGold {
            task_id: task.id.clone(),
            step: step.index,
        })?;
        let mut instruction = step.instruction.trim().to_string();
        if !previous.is_empty() {
            instruction.push_str(" Here is the previous code:\n");
            instruction.push_str(&crate::model::join_cells(previous.iter().copied()));
        }
        out.push(TaskSpec {
            id: format!("{}#{}", task.id, step.index),
            kind: TaskKind::SingleTurn,
            libraries: task.libraries.clone(),
            steps: vec![StepSpec {
                index: 0,
                instruction,
                ..step.clone()
            }],
        });
        previous.push(gold);
    }
    Ok(out)
}

fn gold_set(step: &StepSpec, mode: LabelMode) -> LabelSet {
    if let Some(labels) = &step.gold_labels {
        return LabelSet::new(labels.iter().cloned()).with_mode(mode);
    }
    step.gold_code
        .as_deref()
        .map(|c| predicted_set(c, mode))
        .unwrap_or_default()
}

fn predicted_set(code: &str, mode: LabelMode) -> LabelSet {
    // unparseable output predicts nothing
    extract_call_labels(code)
        .map(|calls| LabelSet::from_calls(&calls, mode))
        .unwrap_or_default()
}

struct TaskOutcome {
    pairs: Vec<(LabelSet, LabelSet)>,
    pass1: f64,
    complete1: Option<f64>,
    interventions: usize,
    error: Option<String>,
}

impl TaskOutcome {
    fn failed(task: &TaskSpec, mode: LabelMode, multi: bool, error: String) -> Self {
        Self {
            pairs: task.steps.iter().map(|s| (gold_set(s, mode), LabelSet::default())).collect(),
            pass1: 0.0,
            complete1: multi.then_some(0.0),
            interventions: 0,
            error: Some(error),
        }
    }
}

fn deps_for(deps: &Deps, rag: RagMode) -> Result<Arc<Deps>, HarnessError> {
    let mut deps = deps.clone();
    match rag {
        RagMode::At0 => deps.retrieval = None,
        RagMode::At3 if deps.retrieval.is_none() => return Err(HarnessError::NoRetriever),
        RagMode::At3 => {}
    }
    Ok(Arc::new(deps))
}

fn cfg_for(cfg: &AgentConfig, rag: RagMode) -> AgentConfig {
    let mut cfg = cfg.clone();
    if rag == RagMode::At3 {
        cfg.k_retrieve = rag.retrieval_k();
    }
    cfg
}

/// Per original step, the code committed for it; definition cells count
/// toward the step they were inserted for.
fn committed_by_step(state: &RunState) -> Vec<Option<String>> {
    let mut out = vec![None; state.total_steps()];
    let mut pending: Vec<&str> = Vec::new();
    for cell in &state.cells {
        match cell.origin {
            StepOrigin::Inserted => pending.push(&cell.code),
            StepOrigin::Original(i) => {
                pending.push(&cell.code);
                out[i] = Some(crate::model::join_cells(pending.drain(..)));
            }
        }
    }
    out
}

/// Code of the latest failed attempt at original step `orig`.
fn last_failed_code(state: &RunState, orig: usize) -> Option<String> {
    state
        .steps
        .iter()
        .find(|s| s.origin == StepOrigin::Original(orig))?
        .history
        .iter()
        .rev()
        .find(|e| e.kind == HistoryKind::FailedAttempt)
        .map(|e| e.code.clone())
}

/// Drives one task to its end. In human-scripted mode each pause is answered
/// with the recorded edits for that step; when none passes the run is cancelled.
pub fn run_task(
    task: &TaskSpec,
    cfg: &AgentConfig,
    deps: Arc<Deps>,
    mode: MultiTurnMode<'_>,
    sink: Box<dyn EventSink>,
) -> Result<RunState, AgentError> {
    let run_mode = match mode {
        MultiTurnMode::Auto => RunMode::Auto,
        MultiTurnMode::HumanScripted(_) => RunMode::Human,
    };
    let mut agent = Agent::create(task.id.clone(), task.clone(), cfg.clone(), run_mode, deps, sink)?;
    loop {
        let status = agent.drive()?;
        if status != RunStatus::Paused {
            break;
        }
        let MultiTurnMode::HumanScripted(script) = mode else {
            break;
        };
        let state = agent.state();
        let step = state.pending.as_ref().expect("paused run has a pending request").step_index;
        // an inserted step stands in for the original step that follows it
        let orig = state.steps[step..]
            .iter()
            .find_map(|s| match s.origin {
                StepOrigin::Original(i) => Some(i),
                StepOrigin::Inserted => None,
            })
            .unwrap_or(step);
        let mut accepted = false;
        let edits: Vec<ScriptedEdit> = script.for_step(&task.id, orig).cloned().collect();
        for e in edits {
            let edit = HumanEdit {
                step_index: step,
                edited_code: e.edited_code,
                note: e.note,
            };
            if let EditOutcome::Accepted { .. } = agent.apply_edit(edit)? {
                accepted = true;
                break;
            }
        }
        if !accepted {
            agent.cancel()?;
            break;
        }
    }
    Ok(agent.into_state())
}

fn agent_outcome(state: &RunState, mode: LabelMode, multi: bool) -> TaskOutcome {
    let committed = committed_by_step(state);
    let pairs = state
        .task
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let code = committed[i].clone().or_else(|| last_failed_code(state, i));
            (gold_set(s, mode), code.map(|c| predicted_set(&c, mode)).unwrap_or_default())
        })
        .collect();
    let complete = state.program().complete_rate();
    TaskOutcome {
        pairs,
        pass1: if complete == 1.0 { 1.0 } else { 0.0 },
        complete1: multi.then_some(complete),
        interventions: state
            .resolved
            .iter()
            .filter(|r| r.state == InterventionState::Resolved)
            .count(),
        error: None,
    }
}

/// Baseline: one sample per step on top of the previous steps' code.
fn run_llm_only(
    task: &TaskSpec,
    cfg: &AgentConfig,
    deps: &Deps,
    opts: &EvalOptions,
    edits: Option<&EditScript>,
) -> Result<TaskOutcome, String> {
    let params = SamplingParams::from(cfg);
    let timeout = Duration::from_millis(cfg.cell_timeout_ms);
    let mut cells: Vec<String> = Vec::new();
    let mut pairs = Vec::new();
    let mut passed_all = true;
    let mut interventions = 0;
    for step in &task.steps {
        let gold = gold_set(step, opts.label_mode);
        if !passed_all {
            pairs.push((gold, LabelSet::default()));
            continue;
        }
        let library = if !step.library_hints.is_empty() {
            step.library_hints.join(", ")
        } else if !task.libraries.is_empty() {
            task.libraries.join(", ")
        } else {
            "standard library".to_string()
        };
        let mut body = step.instruction.trim().to_string();
        if !cells.is_empty() {
            body.push_str("\nHere is the previous code:\n");
            body.push_str(&crate::model::join_cells(cells.iter().map(String::as_str)));
        }
        if let Some(r) = &deps.retrieval {
            if should_retrieve(step, &deps.known_libraries) {
                let filter: BTreeSet<String> = step.library_hints.iter().cloned().collect();
                let filter = (!filter.is_empty()).then_some(filter);
                let items = r
                    .index
                    .query(&step.instruction, filter.as_ref(), cfg.k_retrieve, r.embedder.as_ref())
                    .map_err(|e| e.to_string())?;
                if !items.is_empty() {
                    body.push_str("\nRelevant functions:");
                    for item in items {
                        body.push_str(&format!("\n- {} ({}): {}", item.function_name, item.library, item.usage.trim()));
                    }
                }
            }
        }
        let prompt = render_prompt(TemplateName::Inference, &[("library", &library), ("prompt", &body)])
            .expect("inference slots are fixed");
        let text = deps
            .llm
            .complete(&prompt, params, 1)
            .map_err(|e| e.to_string())?
            .into_iter()
            .next()
            .map(|c| c.text)
            .unwrap_or_default();
        let code = candidate_code(&text);
        let prefix: Vec<&str> = cells.iter().map(String::as_str).collect();
        let outcome = check_candidate(deps.sandbox.as_ref(), &prefix, &code, timeout).map_err(|e| e.to_string())?;
        let mut kept = outcome.passed().then(|| code.clone());
        if kept.is_none() {
            if let Some(script) = edits {
                for e in script.for_step(&task.id, step.index) {
                    let ok = check_candidate(deps.sandbox.as_ref(), &prefix, &e.edited_code, timeout)
                        .map_err(|e| e.to_string())?;
                    if ok.passed() {
                        interventions += 1;
                        kept = Some(e.edited_code.clone());
                        break;
                    }
                }
            }
        }
        match kept {
            Some(c) => {
                pairs.push((gold, predicted_set(&c, opts.label_mode)));
                cells.push(c);
            }
            None => {
                pairs.push((gold, predicted_set(&code, opts.label_mode)));
                passed_all = false;
            }
        }
    }
    let complete = cells.len() as f64 / task.steps.len().max(1) as f64;
    Ok(TaskOutcome {
        pairs,
        pass1: if passed_all { 1.0 } else { 0.0 },
        complete1: (task.steps.len() > 1 || task.kind == TaskKind::MultiTurn).then_some(complete),
        interventions,
        error: None,
    })
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

type Pairs = [(LabelSet, LabelSet)];

fn fold_report(
    tasks: &[TaskSpec],
    outcomes: Vec<TaskOutcome>,
    opts: &EvalOptions,
    run_mode: ReportRunMode,
    multi: bool,
) -> MetricsReport {
    let mut per_task = BTreeMap::new();
    let mut all_pairs = Vec::new();
    let mut by_id: Vec<(&TaskSpec, TaskOutcome)> = tasks.iter().zip(outcomes).collect();
    by_id.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    let metric = |pairs: &Pairs, f: &dyn Fn(&Pairs) -> f64| {
        if pairs.is_empty() {
            0.0
        } else {
            f(pairs)
        }
    };
    let acc = |p: &Pairs| metric_accuracy(p).expect("nonempty");
    let rec = |p: &Pairs| metric_recall(p, opts.pr).expect("nonempty");
    let prec = |p: &Pairs| metric_precision(p, opts.pr).expect("nonempty");
    let f1 = |p: &Pairs| metric_f1(p).expect("nonempty");
    let (mut pass_sum, mut complete_sum) = (0.0, 0.0);
    for (task, o) in &by_id {
        per_task.insert(
            task.id.clone(),
            TaskMetrics {
                accuracy: metric(&o.pairs, &acc),
                recall: metric(&o.pairs, &rec),
                precision: metric(&o.pairs, &prec),
                f1: metric(&o.pairs, &f1),
                pass1: o.pass1,
                complete1: o.complete1,
                steps: task.steps.len(),
                interventions: o.interventions,
                error: o.error.clone(),
            },
        );
        pass_sum += o.pass1;
        complete_sum += o.complete1.unwrap_or(0.0);
        all_pairs.extend(o.pairs.iter().cloned());
    }
    let n = by_id.len().max(1) as f64;
    let universe = label_universe(&all_pairs);
    let hamming = if all_pairs.is_empty() {
        0.0
    } else {
        metric_hamming(&all_pairs, &universe).expect("universe covers every label")
    };
    MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        per_task,
        aggregate: AggregateMetrics {
            accuracy: metric(&all_pairs, &acc),
            recall: metric(&all_pairs, &rec),
            precision: metric(&all_pairs, &prec),
            f1: metric(&all_pairs, &f1),
            pass1: pass_sum / n,
            complete1: multi.then_some(complete_sum / n),
        },
        hamming,
        universe_size_k: universe.len(),
        mode: opts.rag,
        run_mode,
        label_mode: opts.label_mode,
        pr_convention: opts.pr,
        empty_set_rule: EMPTY_SET_RULE.to_string(),
    }
}

/// Generates each single-turn task once and scores execution and labels.
/// Failures of one task are recorded in its row and do not stop the suite.
pub fn evaluate_single_turn(
    suite: &[TaskSpec],
    deps: &Deps,
    cfg: &AgentConfig,
    opts: &EvalOptions,
) -> Result<MetricsReport, HarnessError> {
    let deps = deps_for(deps, opts.rag)?;
    let cfg = cfg_for(cfg, opts.rag);
    let outcomes: Vec<TaskOutcome> = pool(opts.jobs)?.install(|| {
        suite
            .par_iter()
            .map(|task| {
                if task.steps.len() != 1 {
                    return TaskOutcome::failed(task, opts.label_mode, false, "not a single-turn task".into());
                }
                let result = match opts.solver {
                    Solver::Agent => crate::refine::run_search(task, &cfg, deps.clone())
                        .map(|(state, _)| agent_outcome(&state, opts.label_mode, false))
                        .map_err(|e| e.to_string()),
                    Solver::LlmOnly => run_llm_only(task, &cfg, &deps, opts, None).map(|mut o| {
                        o.complete1 = None;
                        o
                    }),
                };
                result.unwrap_or_else(|e| TaskOutcome::failed(task, opts.label_mode, false, e))
            })
            .collect()
    });
    Ok(fold_report(suite, outcomes, opts, ReportRunMode::Auto, false))
}

/// Runs each task step by step and reports complete@1 under the given mode.
pub fn evaluate_multi_turn(
    suite: &[TaskSpec],
    deps: &Deps,
    cfg: &AgentConfig,
    mode: MultiTurnMode<'_>,
    opts: &EvalOptions,
) -> Result<MetricsReport, HarnessError> {
    let deps = deps_for(deps, opts.rag)?;
    let cfg = cfg_for(cfg, opts.rag);
    let outcomes: Vec<TaskOutcome> = pool(opts.jobs)?.install(|| {
        suite
            .par_iter()
            .map(|task| {
                let result = match opts.solver {
                    Solver::Agent => run_task(task, &cfg, deps.clone(), mode, Box::new(Vec::new()))
                        .map(|state| agent_outcome(&state, opts.label_mode, true))
                        .map_err(|e| e.to_string()),
                    Solver::LlmOnly => {
                        let edits = match mode {
                            MultiTurnMode::Auto => None,
                            MultiTurnMode::HumanScripted(s) => Some(s),
                        };
                        run_llm_only(task, &cfg, &deps, opts, edits).map(|mut o| {
                            o.complete1 = o.complete1.or(Some(o.pass1));
                            o
                        })
                    }
                };
                result.unwrap_or_else(|e| TaskOutcome::failed(task, opts.label_mode, true, e))
            })
            .collect()
    });
    let run_mode = match mode {
        MultiTurnMode::Auto => ReportRunMode::Auto,
        MultiTurnMode::HumanScripted(_) => ReportRunMode::Human,
    };
    Ok(fold_report(suite, outcomes, opts, run_mode, true))
}
