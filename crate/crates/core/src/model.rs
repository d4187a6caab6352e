//! Canonical domain types and the benchmark-suite file format.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate task id `{0}`")]
    DuplicateId(String),
    #[error("task `{task_id}`: {reason}")]
    Invalid { task_id: String, reason: String },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleTurn,
    MultiTurn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub index: usize,
    pub instruction: String,
    #[serde(default)]
    pub library_hints: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<BTreeSet<String>>,
}

impl StepSpec {
    pub fn new(index: usize, instruction: impl Into<String>) -> Self {
        Self {
            index,
            instruction: instruction.into(),
            library_hints: Vec::new(),
            gold_code: None,
            gold_labels: None,
        }
    }

    pub fn with_gold_code(mut self, code: impl Into<String>) -> Self {
        self.gold_code = Some(code.into());
        self
    }

    pub fn with_hints<I, S>(mut self, hints: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.library_hints = hints.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub libraries: Vec<String>,
    pub steps: Vec<StepSpec>,
}

impl TaskSpec {
    /// Builds a task from instructions, numbering steps and picking the kind
    /// from the step count.
    pub fn from_instructions<I, S>(id: impl Into<String>, libraries: &[&str], steps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let steps: Vec<StepSpec> = steps
            .into_iter()
            .enumerate()
            .map(|(i, s)| StepSpec::new(i, s))
            .collect();
        let kind = if steps.len() == 1 {
            TaskKind::SingleTurn
        } else {
            TaskKind::MultiTurn
        };
        Self {
            id: id.into(),
            kind,
            libraries: libraries.iter().map(|s| s.to_string()).collect(),
            steps,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason: &str| ModelError::Invalid {
            task_id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id must be non-empty"));
        }
        match self.kind {
            TaskKind::SingleTurn if self.steps.len() != 1 => {
                return Err(invalid("single_turn task must have exactly 1 step"))
            }
            TaskKind::MultiTurn if self.steps.len() < 2 => {
                return Err(invalid("multi_turn task must have at least 2 steps"))
            }
            _ => {}
        }
        if self.steps.iter().enumerate().any(|(i, s)| s.index != i) {
            return Err(invalid("non-contiguous step indices"));
        }
        let libraries: HashSet<&str> = self.libraries.iter().map(String::as_str).collect();
        for step in &self.steps {
            if step.instruction.trim().is_empty() {
                return Err(invalid(&format!("step {} has an empty instruction", step.index)));
            }
            if let Some(hint) = step
                .library_hints
                .iter()
                .find(|h| !libraries.contains(h.as_str()))
            {
                return Err(invalid(&format!(
                    "step {} hints library `{hint}` not listed by the task",
                    step.index
                )));
            }
            if step.gold_labels.is_some() && step.gold_code.is_none() {
                return Err(invalid(&format!(
                    "step {} has gold_labels without gold_code",
                    step.index
                )));
            }
        }
        Ok(())
    }

    /// Joined instruction history `S_i`: every step instruction up to and including `index`.
    pub fn instruction_history(&self, index: usize) -> Vec<&str> {
        self.steps
            .iter()
            .take(index + 1)
            .map(|s| s.instruction.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Fill absent `gold_labels` from `gold_code` via call-label extraction.
    pub derive_gold_labels: bool,
}

pub fn parse_suite(bytes: &[u8]) -> Result<Vec<TaskSpec>, ModelError> {
    parse_suite_with(bytes, LoadOptions::default())
}

pub fn parse_suite_with(bytes: &[u8], opts: LoadOptions) -> Result<Vec<TaskSpec>, ModelError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let mut tasks: Vec<TaskSpec> =
        serde_path_to_error::deserialize(de).map_err(|e| ModelError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    let mut seen = HashSet::new();
    for task in &mut tasks {
        task.validate()?;
        if !seen.insert(task.id.clone()) {
            return Err(ModelError::DuplicateId(task.id.clone()));
        }
        if opts.derive_gold_labels {
            derive_gold_labels(task);
        }
    }
    Ok(tasks)
}

/// Fills missing gold label sets from gold code. Steps whose gold code does
/// not parse are left without labels.
pub fn derive_gold_labels(task: &mut TaskSpec) {
    for step in &mut task.steps {
        if step.gold_labels.is_some() {
            continue;
        }
        if let Some(code) = &step.gold_code {
            if let Ok(labels) = analysis::extract_call_labels(code) {
                step.gold_labels = Some(labels.into_iter().map(|l| l.0).collect());
            }
        }
    }
}

pub fn serialize_suite(tasks: &[TaskSpec]) -> Result<Vec<u8>, ModelError> {
    let mut seen = HashSet::new();
    for task in tasks {
        task.validate()?;
        if !seen.insert(task.id.as_str()) {
            return Err(ModelError::DuplicateId(task.id.clone()));
        }
    }
    let mut out = serde_json::to_vec_pretty(tasks).expect("suite serializes");
    out.push(b'\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub c_base: f64,
    pub c: f64,
    pub n_samples: usize,
    pub k_top: usize,
    pub k_retrieve: usize,
    pub max_attempts: u32,
    /// Number of future steps covered by a look-ahead rollout; `None` means all remaining.
    pub lookahead_steps: Option<usize>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub context_window_tokens: usize,
    pub cell_timeout_ms: u64,
    pub query_includes_prior_code: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            c_base: 10.0,
            c: 4.0,
            n_samples: 6,
            k_top: 3,
            k_retrieve: 3,
            max_attempts: 3,
            lookahead_steps: None,
            temperature: 0.6,
            top_p: 0.9,
            max_tokens: 2048,
            context_window_tokens: 32_768,
            cell_timeout_ms: 30_000,
            query_includes_prior_code: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> Result<(), ModelError> {
            Err(ModelError::Config {
                field,
                reason: reason.into(),
            })
        }
        if !(self.c_base > 0.0 && self.c_base.is_finite()) {
            return bad("c_base", "must be a positive real");
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return bad("c", "must be a non-negative real");
        }
        if self.n_samples == 0 {
            return bad("n_samples", "must be positive");
        }
        if self.k_top == 0 {
            return bad("k_top", "must be positive");
        }
        if self.k_top > self.n_samples {
            return bad(
                "k_top",
                format!("k_top ({}) exceeds n_samples ({})", self.k_top, self.n_samples),
            );
        }
        if self.max_attempts == 0 {
            return bad("max_attempts", "must be positive");
        }
        if self.lookahead_steps == Some(0) {
            return bad("lookahead_steps", "must be positive when set");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature", "must lie in [0, 2]");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p", "must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens", "must be positive");
        }
        if self.context_window_tokens == 0 {
            return bad("context_window_tokens", "must be positive");
        }
        if self.cell_timeout_ms == 0 {
            return bad("cell_timeout_ms", "must be positive");
        }
        Ok(())
    }
}

/// Where a working step came from: the task itself, or a definition step
/// inserted by tree surgery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "origin", content = "index")]
pub enum StepOrigin {
    Original(usize),
    Inserted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramCell {
    pub step_index: usize,
    pub origin: StepOrigin,
    pub code: String,
    /// Tree node (or human edit node) that produced the cell.
    pub outcome_ref: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionProgram {
    pub task_id: String,
    pub cells: Vec<ProgramCell>,
    /// Original task steps inside the committed prefix.
    pub completed_steps: usize,
    /// Original task step count (inserted definition steps are not counted).
    pub total_steps: usize,
}

impl SolutionProgram {
    pub fn source(&self) -> String {
        join_cells(self.cells.iter().map(|c| c.code.as_str()))
    }

    pub fn complete_rate(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.completed_steps as f64 / self.total_steps as f64
        }
    }
}

pub(crate) fn join_cells<'a>(cells: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for cell in cells {
        out.push_str(cell.trim_end_matches('\n'));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_json(index: usize) -> String {
        format!(r#"{{"index": {index}, "instruction": "do {index}", "library_hints": []}}"#)
    }

    #[test]
    fn minimal_single_turn_document() {
        let doc = r#"[{"id": "t1", "kind": "single_turn", "libraries": ["geemap"],
            "steps": [{"index": 0, "instruction": "show a map", "gold_code": "import geemap\nm = geemap.Map()"}]}]"#;
        let tasks = parse_suite(doc.as_bytes()).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].kind, TaskKind::SingleTurn);
        assert_eq!(tasks[0].steps[0].gold_labels, None);
    }

    #[test]
    fn ten_step_task_round_trips() {
        let steps: Vec<String> = (0..10).map(step_json).collect();
        let doc = format!(
            r#"[{{"id": "long", "kind": "multi_turn", "libraries": [], "steps": [{}]}}]"#,
            steps.join(",")
        );
        let tasks = parse_suite(doc.as_bytes()).unwrap();
        assert_eq!(tasks[0].kind, TaskKind::MultiTurn);
        let indices: Vec<usize> = tasks[0].steps.iter().map(|s| s.index).collect();
        assert_eq!(indices, (0..10).collect::<Vec<_>>());
        let bytes = serialize_suite(&tasks).unwrap();
        assert_eq!(parse_suite(&bytes).unwrap(), tasks);
    }

    #[test]
    fn non_contiguous_indices_rejected() {
        let doc = format!(
            r#"[{{"id": "gap", "kind": "multi_turn", "steps": [{}, {}]}}]"#,
            step_json(0),
            step_json(2)
        );
        let err = parse_suite(doc.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("non-contiguous step indices"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let task = format!(r#"{{"id": "a", "kind": "single_turn", "steps": [{}]}}"#, step_json(0));
        let doc = format!("[{task},{task}]");
        assert_eq!(
            parse_suite(doc.as_bytes()).unwrap_err(),
            ModelError::DuplicateId("a".into())
        );
    }

    #[test]
    fn unknown_field_names_path() {
        let doc = r#"[{"id": "a", "kind": "single_turn",
            "steps": [{"index": 0, "instruction": "x", "colour": 1}]}]"#;
        match parse_suite(doc.as_bytes()).unwrap_err() {
            ModelError::Schema { path, message } => {
                assert_eq!(path, "[0].steps[0].colour");
                assert!(message.contains("unknown field"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labels_without_code_rejected() {
        let doc = r#"[{"id": "a", "kind": "single_turn",
            "steps": [{"index": 0, "instruction": "x", "gold_labels": ["f"]}]}]"#;
        assert!(matches!(
            parse_suite(doc.as_bytes()),
            Err(ModelError::Invalid { .. })
        ));
    }

    #[test]
    fn kind_step_count_checked() {
        let doc = format!(r#"[{{"id": "a", "kind": "multi_turn", "steps": [{}]}}]"#, step_json(0));
        assert!(parse_suite(doc.as_bytes()).is_err());
    }

    #[test]
    fn empty_suite() {
        assert_eq!(serialize_suite(&[]).unwrap(), b"[]\n");
        assert!(parse_suite(b"[]").unwrap().is_empty());
    }

    #[test]
    fn derived_labels_behind_flag() {
        let doc = r#"[{"id": "a", "kind": "single_turn",
            "steps": [{"index": 0, "instruction": "x", "gold_code": "f(g(1))"}]}]"#;
        let plain = parse_suite(doc.as_bytes()).unwrap();
        assert!(plain[0].steps[0].gold_labels.is_none());
        let derived = parse_suite_with(
            doc.as_bytes(),
            LoadOptions {
                derive_gold_labels: true,
            },
        )
        .unwrap();
        let labels: Vec<_> = derived[0].steps[0].gold_labels.clone().unwrap().into_iter().collect();
        assert_eq!(labels, vec!["f".to_string(), "g".to_string()]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = AgentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.temperature, 0.6);
        assert_eq!(cfg.top_p, 0.9);
        assert_eq!(cfg.max_tokens, 2048);
        assert_eq!(cfg.k_top, 3);
        assert_eq!(cfg.k_retrieve, 3);
        assert!(cfg.context_window_tokens >= 32_768);

        let bad = AgentConfig {
            k_top: 7,
            ..AgentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config { field: "k_top", .. })));
    }

    #[test]
    fn config_partial_json() {
        let cfg: AgentConfig = serde_json::from_str(r#"{"k_top": 2, "temperature": 0.2}"#).unwrap();
        assert_eq!(cfg.k_top, 2);
        assert_eq!(cfg.n_samples, 6);
        assert!(serde_json::from_str::<AgentConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
