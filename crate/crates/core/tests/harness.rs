mod common;

use stepforge_core::harness::{
    convert_multi_to_single, emit_report, evaluate_multi_turn, evaluate_single_turn, parse_report,
    EditScript, EvalOptions, MultiTurnMode, ReportFormat, ScriptedEdit, Solver,
};
use stepforge_core::llm::ScriptEntry;
use stepforge_core::model::derive_gold_labels;
use stepforge_core::{ScriptedProvider, TaskSpec};

use common::{lookahead, reply, tight_cfg as cfg};

fn single_turn_suite() -> Vec<TaskSpec> {
    let specs = [
        ("s1", "Compute the square root of 16.", "import math\nr = math.sqrt(16)"),
        ("s2", "Join the words a and b.", "s = '-'.join(['a', 'b'])\nprint(s.upper())"),
        ("s3", "Sort the numbers three and one.", "xs = sorted([3, 1])\nprint(len(xs))"),
    ];
    specs
        .iter()
        .map(|(id, instr, gold)| {
            let mut t = TaskSpec::from_instructions(*id, &[], [*instr]);
            t.steps[0].gold_code = Some(gold.to_string());
            derive_gold_labels(&mut t);
            t
        })
        .collect()
}

#[test]
fn oracle_single_turn_scores_perfectly() {
    let suite = single_turn_suite();
    let mut entries: Vec<ScriptEntry> = suite
        .iter()
        .map(|t| reply(&t.steps[0].instruction, t.steps[0].gold_code.as_deref().unwrap()))
        .collect();
    entries.push(lookahead());
    for solver in [Solver::Agent, Solver::LlmOnly] {
        let (deps, _) = common::deps_with(ScriptedProvider::new(entries.clone()));
        let opts = EvalOptions {
            solver,
            ..EvalOptions::default()
        };
        let report = evaluate_single_turn(&suite, &deps, &cfg(), &opts).unwrap();
        assert_eq!(report.aggregate.pass1, 1.0, "{solver:?}");
        assert_eq!(report.aggregate.f1, 1.0);
        assert_eq!(report.hamming, 0.0);
        assert_eq!(report.infrastructure_errors(), 0);
        assert!(report.universe_size_k >= 5);
        let bytes = emit_report(&report, ReportFormat::Structured);
        assert_eq!(emit_report(&parse_report(&bytes).unwrap(), ReportFormat::Structured), bytes);
    }
}

#[test]
fn unparseable_output_predicts_nothing() {
    let suite = single_turn_suite();
    let (deps, _) = common::deps_with(ScriptedProvider::always(["this is not ) python"]));
    let opts = EvalOptions {
        solver: Solver::LlmOnly,
        ..EvalOptions::default()
    };
    let report = evaluate_single_turn(&suite, &deps, &cfg(), &opts).unwrap();
    assert_eq!(report.aggregate.pass1, 0.0);
    assert_eq!(report.aggregate.f1, 0.0);

    assert!(report.hamming > 0.0);
}

use common::{five_then_fail, ten_steps};

#[test]
fn multi_turn_prefix_and_human_edits() {
    let task = ten_steps();
    let (deps, _) = common::deps_with(ScriptedProvider::new(five_then_fail()));
    let opts = EvalOptions::default();
    let report = evaluate_multi_turn(std::slice::from_ref(&task), &deps, &cfg(), MultiTurnMode::Auto, &opts).unwrap();
    assert_eq!(report.per_task["ten"].complete1, Some(0.5));
    assert_eq!(report.aggregate.complete1, Some(0.5));
    assert_eq!(report.aggregate.pass1, 0.0);

    let script = EditScript {
        edits: vec![
            ScriptedEdit {
                task_id: "ten".into(),
                step: 5,
                edited_code: "v5 = undefined_thing".into(),
                note: None,
            },
            ScriptedEdit {
                task_id: "ten".into(),
                step: 5,
                edited_code: "v5 = int(5)".into(),
                note: None,
            },
        ],
    };
    let (deps, _) = common::deps_with(ScriptedProvider::new(five_then_fail()));
    let report = evaluate_multi_turn(
        std::slice::from_ref(&task),
        &deps,
        &cfg(),
        MultiTurnMode::HumanScripted(&script),
        &opts,
    )
    .unwrap();
    let row = &report.per_task["ten"];
    assert_eq!(row.complete1, Some(1.0));
    assert_eq!(row.interventions, 1);
    assert_eq!(row.f1, 1.0);
    let table = String::from_utf8(emit_report(&report, ReportFormat::Table)).unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row[row.len() - 2..], ["-", "1.000"], "{table}");
    assert!(table.contains("K = 1"), "{table}");
}

#[test]
fn converted_rounds_match_steps() {
    let task = ten_steps();
    let singles = convert_multi_to_single(&task).unwrap();
    assert_eq!(singles.len(), 10);
    assert!(singles[9].steps[0].instruction.contains("v8 = int(8)"));
}
