//! Benchmark evaluation: function-call label metrics, pass@1 and complete@1.

mod eval;
mod metrics;
mod report;

pub use eval::{
    complete_at_1, convert_multi_to_single, evaluate_multi_turn, evaluate_single_turn, run_task, EditScript,
    EvalOptions, HarnessError, MultiTurnMode, ScriptedEdit, Solver,
};
pub use metrics::{
    label_universe, metric_accuracy, metric_f1, metric_hamming, metric_precision, metric_recall,
    LabelSet, MetricError, PrConvention,
};
pub use report::{
    emit_report, parse_report, AggregateMetrics, MetricsReport, RagMode, ReportFormat,
    ReportRunMode, TaskMetrics, EMPTY_SET_RULE, REPORT_SCHEMA_VERSION,
};
