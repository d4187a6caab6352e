use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::PrConvention;
use crate::analysis::LabelMode;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const EMPTY_SET_RULE: &str =
    "a term with a zero denominator counts 1 when both label sets are empty and 0 when exactly one is";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RagMode {
    #[default]
    At0,
    At3,
}

impl RagMode {
    pub fn retrieval_k(self) -> usize {
        match self {
            RagMode::At0 => 0,
            RagMode::At3 => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportRunMode {
    #[default]
    Auto,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub pass1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete1: Option<f64>,
    pub steps: usize,
    #[serde(default)]
    pub interventions: usize,
    /// Infrastructure failure that stopped this task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub pass1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub per_task: BTreeMap<String, TaskMetrics>,
    pub aggregate: AggregateMetrics,
    pub hamming: f64,
    #[serde(rename = "universe_size_K")]
    pub universe_size_k: usize,
    pub mode: RagMode,
    pub run_mode: ReportRunMode,
    pub label_mode: LabelMode,
    pub pr_convention: PrConvention,
    pub empty_set_rule: String,
}

impl MetricsReport {
    pub fn infrastructure_errors(&self) -> usize {
        self.per_task.values().filter(|t| t.error.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Structured,
    Table,
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Structured => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Table => render_table(report).into_bytes(),
    }
}

pub fn parse_report(bytes: &[u8]) -> Result<MetricsReport, serde_json::Error> {
    serde_json::from_slice(bytes)
}

fn rate(v: f64) -> String {
    format!("{v:.3}")
}

fn render_table(report: &MetricsReport) -> String {
    let id_width = report.per_task.keys().map(|k| k.len()).max().unwrap_or(4).max(4);
    let mut out = String::new();
    let header = |out: &mut String, cols: [&str; 10]| {
        let _ = writeln!(
            out,
            "{:>4}  {:<id_width$}  {:>5}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}",
            cols[0], cols[1], cols[2], cols[3], cols[4], cols[5], cols[6], cols[7], cols[8], cols[9]
        );
    };
    header(&mut out, ["idx", "task", "steps", "A", "R", "P", "F1", "pass@1", "Aut.", "Hum."]);
    let completion = |c: Option<f64>, mode: ReportRunMode| {
        let v = c.map(rate).unwrap_or_else(|| "-".into());
        match report.run_mode {
            m if m == mode => v,
            _ => "-".into(),
        }
    };
    for (idx, (id, t)) in report.per_task.iter().enumerate() {
        let idx = idx.to_string();
        let steps = t.steps.to_string();
        let cols = [
            idx.as_str(),
            id.as_str(),
            steps.as_str(),
            &rate(t.accuracy),
            &rate(t.recall),
            &rate(t.precision),
            &rate(t.f1),
            &rate(t.pass1),
            &completion(t.complete1, ReportRunMode::Auto),
            &completion(t.complete1, ReportRunMode::Human),
        ];
        header(&mut out, cols);
    }
    if !report.per_task.is_empty() {
        let a = &report.aggregate;
        header(
            &mut out,
            [
                "",
                "mean",
                "",
                &rate(a.accuracy),
                &rate(a.recall),
                &rate(a.precision),
                &rate(a.f1),
                &rate(a.pass1),
                &completion(a.complete1, ReportRunMode::Auto),
                &completion(a.complete1, ReportRunMode::Human),
            ],
        );
    }
    let labels = match report.label_mode {
        LabelMode::Dotted => "dotted",
        LabelMode::Bare => "bare",
    };
    let pr = match report.pr_convention {
        PrConvention::AsPrinted => "as printed",
        PrConvention::Conventional => "conventional",
    };
    let rag = match report.mode {
        RagMode::At0 => "@0",
        RagMode::At3 => "@3",
    };
    let _ = writeln!(
        out,
        "K = {}  hamming = {:.4}  rag = {rag}  labels = {labels}  recall/precision = {pr}",
        report.universe_size_k, report.hamming
    );
    out
}
