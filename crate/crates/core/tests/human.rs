mod common;

use std::sync::atomic::Ordering;

use stepforge_core::refine::{AgentError, EditOutcome, SharedSink, StepResult};
use stepforge_core::run::InterventionState;
use stepforge_core::{Agent, AgentConfig, HumanEdit, RunMode, RunState, RunStatus, ScriptedProvider, TaskSpec};

fn cfg() -> AgentConfig {
    AgentConfig {
        max_attempts: 2,
        n_samples: 2,
        k_top: 2,
        cell_timeout_ms: 10_000,
        ..AgentConfig::default()
    }
}

fn two_step_task() -> TaskSpec {
    TaskSpec::from_instructions("h", &[], ["Set x to 2.", "Print x squared."])
}

fn failing_second_step() -> ScriptedProvider {
    use stepforge_core::llm::{ScriptEntry, ScriptedCandidate};
    use stepforge_core::mcts::LOOKAHEAD_MARKER;
    let t = |s: &str| ScriptedCandidate::Text(s.to_string());
    ScriptedProvider::new(vec![
        ScriptEntry::new(["Set x to 2."], vec![t("x = 2")]).excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new(["Print x squared."], vec![t("print(x ** )"), t("print(x / 0)")])
            .excluding([LOOKAHEAD_MARKER])
            .repeating(),
        ScriptEntry::new([LOOKAHEAD_MARKER], vec![t("pass")]).repeating(),
    ])
}

#[test]
fn exhausted_step_pauses_and_edit_resumes() {
    let (deps, _) = common::deps_with(failing_second_step());
    let log = SharedSink::default();
    let mut agent = Agent::create("run-h", two_step_task(), cfg(), RunMode::Human, deps, Box::new(log.clone())).unwrap();
    assert_eq!(agent.drive().unwrap(), RunStatus::Paused);
    let state = agent.state();
    let pending = state.pending.as_ref().expect("pending intervention");
    assert_eq!(pending.step_index, 1);
    assert_eq!(pending.report.attempts_used, 2);
    assert_eq!(pending.state, InterventionState::Pending);

    let wrong = HumanEdit {
        step_index: 0,
        edited_code: "print(x * x)".into(),
        note: None,
    };
    assert!(matches!(agent.apply_edit(wrong), Err(AgentError::StepMismatch { expected: 1, found: 0 })));

    let bad = HumanEdit {
        step_index: 1,
        edited_code: "print(y * y)".into(),
        note: None,
    };
    assert!(matches!(agent.apply_edit(bad).unwrap(), EditOutcome::Rejected { .. }));
    assert_eq!(agent.state().status, RunStatus::Paused);
    assert_eq!(agent.state().pending.as_ref().unwrap().report.failed_code, "print(y * y)");

    let good = HumanEdit {
        step_index: 1,
        edited_code: "print(x * x)".into(),
        note: Some("square by hand".into()),
    };
    let EditOutcome::Accepted { node } = agent.apply_edit(good).unwrap() else {
        panic!("edit should pass");
    };
    assert_eq!(agent.state().status, RunStatus::Running);
    assert_eq!(agent.drive().unwrap(), RunStatus::Finished);
    let state = agent.state();
    assert_eq!(state.tree.node(node).unwrap().source, stepforge_core::mcts::NodeSource::Human);
    assert_eq!(state.edit_context, vec!["print(x * x)".to_string()]);
    assert_eq!(state.completed_steps, 2);
    assert_eq!(state.resolved[0].state, InterventionState::Resolved);

    let events = log.0.lock().unwrap().clone();
    assert_eq!(RunState::replay(&events).unwrap().to_json(), state.to_json());
}

#[test]
fn auto_mode_fails_after_budget() {
    let (deps, _) = common::deps_with(failing_second_step());
    let mut agent = Agent::create("run-a", two_step_task(), cfg(), RunMode::Auto, deps, Box::new(Vec::new())).unwrap();
    assert_eq!(agent.drive().unwrap(), RunStatus::Failed);
    assert_eq!(agent.state().completed_steps, 1);
    assert_eq!(agent.state().program().complete_rate(), 0.5);
    assert_eq!(agent.state().steps[1].attempts_used, 2);
}

#[test]
fn cancel_flag_stops_and_abandons() {
    let (deps, _) = common::deps_with(failing_second_step());
    let mut agent = Agent::create("run-c", two_step_task(), cfg(), RunMode::Human, deps, Box::new(Vec::new())).unwrap();
    agent.cancel_flag().store(true, Ordering::SeqCst);
    assert_eq!(agent.attempt_step().unwrap(), StepResult::Cancelled);
    assert_eq!(agent.state().status, RunStatus::Cancelled);

    let (deps, _) = common::deps_with(failing_second_step());
    let mut agent = Agent::create("run-d", two_step_task(), cfg(), RunMode::Human, deps, Box::new(Vec::new())).unwrap();
    assert_eq!(agent.drive().unwrap(), RunStatus::Paused);
    agent.cancel().unwrap();
    assert_eq!(agent.state().resolved[0].state, InterventionState::Abandoned);
    assert!(matches!(agent.cancel(), Err(AgentError::NotRunning(RunStatus::Cancelled))));
}
