#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::sync::Arc;

use stepforge_core::llm::{ScriptEntry, ScriptedCandidate};
use stepforge_core::mcts::LOOKAHEAD_MARKER;
use stepforge_core::refine::Deps;
use stepforge_core::model::derive_gold_labels;
use stepforge_core::{AgentConfig, LlmGateway, RunnerConfig, ScriptedProvider, TaskSpec};

pub fn python() -> String {
    std::env::var("STEPFORGE_PYTHON").unwrap_or_else(|_| "python3".to_string())
}

pub fn shim_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("shim/kernel_shim.py")
}

pub fn runner() -> RunnerConfig {
    RunnerConfig::python_shim(python(), shim_path())
}

fn text(s: &str) -> ScriptedCandidate {
    ScriptedCandidate::Text(s.to_string())
}

pub fn e2e_task() -> TaskSpec {
    TaskSpec::from_instructions(
        "e2e",
        &[],
        [
            "Create a list named numbers holding 3, 1 and 2.",
            "Compute total as the sum of numbers plus the offset.",
            "Append 4 to numbers and print the sorted list.",
        ],
    )
}

/// Script for the three-step task: step 1 reads an undefined `offset`
/// (surgery), step 2 calls a missing list method (attribute hint).
pub fn e2e_script() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry::new(
            ["Accessible attributes"],
            vec![text("```python\nnumbers.append(4)\nprint(sorted(numbers))\n```")],
        ),
        ScriptEntry::new(
            ["Defining the undefined variables"],
            vec![text("```python\noffset = 10\n```")],
        )
        .excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new(
            ["Create a list named numbers"],
            vec![text("```python\nnumbers = [3, 1, 2]\n```")],
        )
        .excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new(
            ["Compute total"],
            vec![text("```python\ntotal = sum(numbers) + offset\n```")],
        )
        .excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new(
            ["Compute total"],
            vec![text("```python\ntotal = sum(numbers) + offset\n```")],
        )
        .excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new(
            ["Append 4 to numbers"],
            vec![text("```python\nnumbers.push(4)\nprint(sorted(numbers))\n```")],
        )
        .excluding([LOOKAHEAD_MARKER]),
        ScriptEntry::new([LOOKAHEAD_MARKER], vec![text("```python\npass\n```")]).repeating(),
    ]
}

pub fn deps_with(provider: ScriptedProvider) -> (Arc<Deps>, Arc<ScriptedProvider>) {
    let provider = Arc::new(provider);
    let llm = LlmGateway::new(provider.clone(), 32_768);
    (Arc::new(Deps::new(llm, Arc::new(runner()))), provider)
}

pub fn e2e_deps() -> (Arc<Deps>, Arc<ScriptedProvider>) {
    deps_with(ScriptedProvider::new(e2e_script()))
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Blanks the only non-deterministic field of a response line.
pub fn strip_durations(text: &str) -> String {
    let re = regex::Regex::new(r#""duration_ms":\d+"#).unwrap();
    re.replace_all(text, r#""duration_ms":0"#).into_owned()
}

/// Feeds the fixed request file to the shim and returns (expected, actual)
/// response transcripts with durations blanked.
pub fn golden_transcript() -> (String, String) {
    use std::process::{Command, Stdio};
    let requests = std::fs::File::open(fixture("shim_requests.jsonl")).unwrap();
    let out = Command::new(python())
        .arg("-u")
        .arg(shim_path())
        .stdin(Stdio::from(requests))
        .stderr(Stdio::null())
        .output()
        .expect("run shim");
    assert!(out.status.success(), "shim exited with {}", out.status);
    let actual = strip_durations(&String::from_utf8(out.stdout).unwrap());
    let expected = std::fs::read_to_string(fixture("shim_responses.jsonl")).unwrap();
    (expected, actual)
}

/// One attempt, one sample: each step either passes first time or fails.
pub fn tight_cfg() -> AgentConfig {
    AgentConfig {
        max_attempts: 1,
        n_samples: 1,
        k_top: 1,
        cell_timeout_ms: 10_000,
        ..AgentConfig::default()
    }
}

/// Reusable reply with `code` to prompts mentioning `matches`.
pub fn reply(matches: &str, code: &str) -> ScriptEntry {
    ScriptEntry::new([matches], vec![ScriptedCandidate::Text(format!("```python\n{code}\n```"))])
        .excluding([LOOKAHEAD_MARKER])
        .repeating()
}

pub fn lookahead() -> ScriptEntry {
    ScriptEntry::new([LOOKAHEAD_MARKER], vec![ScriptedCandidate::Text("pass".into())]).repeating()
}

pub fn ten_steps() -> TaskSpec {
    let mut t = TaskSpec::from_instructions("ten", &[], (0..10).map(|i| format!("Set v{i} to {i}.")));
    for (i, s) in t.steps.iter_mut().enumerate() {
        s.gold_code = Some(format!("v{i} = int({i})"));
    }
    derive_gold_labels(&mut t);
    t
}

/// Steps 0-4 pass; step 5 always raises.
pub fn five_then_fail() -> Vec<ScriptEntry> {
    let mut entries: Vec<ScriptEntry> = (0..10)
        .map(|i| {
            let code = if i == 5 {
                "raise ValueError('no')".to_string()
            } else {
                format!("v{i} = int({i})")
            };
            reply(&format!("Set v{i} to {i}."), &code)
        })
        .collect();
    entries.push(lookahead());
    entries
}
