use crate::llm::{estimate_tokens, render_prompt, TemplateName};
use crate::run::{HistoryEntry, HistoryKind, RunState};

/// Library slot for a step: its hints, else the task libraries.
pub fn library_slot(state: &RunState, step: usize) -> String {
    let hints = state.steps.get(step).map(|s| &s.spec.library_hints);
    match hints {
        Some(h) if !h.is_empty() => h.join(", "),
        _ if !state.task.libraries.is_empty() => state.task.libraries.join(", "),
        _ => "standard library".to_string(),
    }
}

fn render_entry(entry: &HistoryEntry) -> String {
    let mut out = String::new();
    match entry.kind {
        HistoryKind::FailedAttempt => out.push_str("Failed attempt:\n"),
        HistoryKind::FailedEdit => out.push_str("Failed user edit:\n"),
        HistoryKind::HumanEdit => out.push_str("User edit:\n"),
    }
    out.push_str(entry.code.trim_end());
    out.push('\n');
    if let Some(err) = &entry.error {
        out.push_str("Error:\n");
        out.push_str(err.trim_end());
        out.push('\n');
    }
    if let Some(hint) = &entry.hint {
        out.push_str("Hint: ");
        out.push_str(&hint.render());
        out.push('\n');
    }
    out
}

/// Earlier attempts at `step`, newest last, dropping the oldest entries
/// until the text fits in `budget_tokens`.
pub fn chat_history_context(state: &RunState, step: usize, budget_tokens: usize) -> String {
    let Some(ws) = state.steps.get(step) else {
        return String::new();
    };
    let rendered: Vec<String> = ws.history.iter().map(render_entry).collect();
    let mut used = 0;
    let mut start = rendered.len();
    for (i, r) in rendered.iter().enumerate().rev() {
        let cost = estimate_tokens(r) + 1;
        if used + cost > budget_tokens {
            break;
        }
        used += cost;
        start = i;
    }
    rendered[start..].join("\n")
}

/// Prompt slot without the chat history.
fn prompt_body(state: &RunState, step: usize) -> String {
    let ws = &state.steps[step];
    let mut body = ws.spec.instruction.trim().to_string();
    let program = state.tree.program(state.frontier).unwrap_or_default();
    if !program.trim().is_empty() {
        body.push_str("\nHere is the previous code:\n");
        body.push_str(program.trim_end());
    }
    if !ws.retrieved.is_empty() {
        body.push_str("\nRelevant functions:");
        for item in &ws.retrieved {
            body.push_str(&format!("\n- {} ({}): {}", item.function_name, item.library, item.usage.trim()));
        }
    }
    if !state.edit_context.is_empty() {
        body.push_str("\nCode edited by the user in earlier steps:");
        for edit in &state.edit_context {
            body.push('\n');
            body.push_str(edit.trim_end());
        }
    }
    body
}

fn render_inference(library: &str, body: &str) -> String {
    render_prompt(TemplateName::Inference, &[("library", library), ("prompt", body)])
        .expect("inference slots are fixed")
}

/// Generation prompt for `step`; after a failed attempt the repair request
/// for the latest failure is placed in front of it.
pub fn step_prompt(state: &RunState, step: usize) -> String {
    let library = library_slot(state, step);
    let body = prompt_body(state, step);
    let repair = state.steps[step]
        .history
        .last()
        .filter(|e| e.kind != HistoryKind::HumanEdit)
        .map(|last| {
            let mut error = String::new();
            if let Some(h) = &last.hint {
                error.push_str(&h.render());
                error.push('\n');
            }
            error.push_str(last.error.as_deref().unwrap_or("the code did not run"));
            render_prompt(TemplateName::UpdateNode, &[("code", last.code.trim_end()), ("error", error.trim_end())])
                .expect("update slots are fixed")
        });

    let fixed = estimate_tokens(&render_inference(&library, &body))
        + repair.as_deref().map_or(0, estimate_tokens)
        + 16;
    let budget = state
        .cfg
        .context_window_tokens
        .saturating_sub(state.cfg.max_tokens as usize)
        .saturating_sub(fixed);
    let history = chat_history_context(state, step, budget);
    let body = if history.is_empty() {
        body
    } else {
        format!("{body}\nEarlier attempts at this step:\n{}", history.trim_end())
    };
    let inference = render_inference(&library, &body);
    match repair {
        Some(r) => format!("{r}\n\n{inference}"),
        None => inference,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentConfig, TaskSpec};
    use crate::run::{EventPayload, RunEvent, RunMode};

    fn state(libraries: &[&str]) -> RunState {
        let task = TaskSpec::from_instructions("t", libraries, ["Load the image.", "Plot it."]);
        RunState::genesis(&RunEvent {
            run_id: "r".into(),
            seq: 0,
            timestamp_ms: 0,
            payload: EventPayload::RunCreated {
                task,
                cfg: AgentConfig::default(),
                mode: RunMode::Auto,
            },
        })
        .unwrap()
    }

    fn failure(code: &str) -> HistoryEntry {
        HistoryEntry {
            kind: HistoryKind::FailedAttempt,
            code: code.into(),
            error: Some("NameError: name 'q' is not defined".into()),
            hint: None,
        }
    }

    #[test]
    fn library_fallbacks() {
        let mut s = state(&[]);
        assert_eq!(library_slot(&s, 0), "standard library");
        s.task.libraries = vec!["geemap".into()];
        assert_eq!(library_slot(&s, 0), "geemap");
        s.steps[0].spec.library_hints = vec!["ee".into(), "folium".into()];
        assert_eq!(library_slot(&s, 0), "ee, folium");
    }

    #[test]
    fn history_drops_oldest_first() {
        let mut s = state(&[]);
        for i in 0..4 {
            s.steps[0].history.push(failure(&format!("attempt_{i} = q")));
        }
        let all = chat_history_context(&s, 0, 10_000);
        assert!(all.find("attempt_0").unwrap() < all.find("attempt_3").unwrap());
        let one = estimate_tokens(&render_entry(&s.steps[0].history[3])) + 1;
        let last_only = chat_history_context(&s, 0, one);
        assert!(last_only.contains("attempt_3") && !last_only.contains("attempt_2"));
        assert_eq!(chat_history_context(&s, 0, 0), "");
    }

    #[test]
    fn repair_prompt_leads_with_failure() {
        let mut s = state(&[]);
        let fresh = step_prompt(&s, 0);
        assert!(fresh.contains("Load the image."));
        assert!(!fresh.contains("Earlier attempts"));
        s.steps[0].history.push(failure("img = q"));
        let repair = step_prompt(&s, 0);
        let pos_code = repair.find("img = q").unwrap();
        assert!(pos_code < repair.find("Load the image.").unwrap());
        assert!(repair.contains("NameError"));
        assert!(repair.ends_with(fresh.lines().last().unwrap()) || repair.contains("Earlier attempts"));
    }
}
