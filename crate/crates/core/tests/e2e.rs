mod common;

use stepforge_core::refine::run_search;
use stepforge_core::{AgentConfig, EventPayload, FixHintKind, RunState, RunStatus};

#[test]
fn surgery_then_attribute_repair_completes() {
    let (deps, provider) = common::e2e_deps();
    let task = common::e2e_task();
    let cfg = AgentConfig {
        cell_timeout_ms: 10_000,
        ..AgentConfig::default()
    };
    let (state, events) = run_search(&task, &cfg, deps).expect("run completes");

    assert_eq!(state.status, RunStatus::Finished, "{:?}", state.finish_reason);
    assert_eq!(state.program().complete_rate(), 1.0);
    assert_eq!(state.steps.len(), 4);

    let surgeries: Vec<_> = events
        .iter()
        .filter(|e| matches!(e.payload, EventPayload::Surgery { .. }))
        .collect();
    assert_eq!(surgeries.len(), 1);
    let api_hints = events
        .iter()
        .filter(|e| {
            matches!(&e.payload, EventPayload::Attempt { hint: Some(h), .. } if h.kind == FixHintKind::AccessibleApiList)
        })
        .count();
    assert_eq!(api_hints, 1);

    let source = state.program().source();
    assert!(source.contains("offset = 10"));
    assert!(source.contains("numbers.append(4)"));
    assert!(!source.contains("push"));

    let replayed = RunState::replay(&events).unwrap();
    assert_eq!(replayed.to_json(), state.to_json());
    assert_eq!(replayed.tree.dump(), state.tree.dump());
    assert!(provider.prompts().len() >= 5);
}
