use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GatewayError, LlmGateway, SamplingParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    Refactor,
    InstructionGen,
    InstructionTune,
    Inference,
    UpdateNode,
    PrependTask,
}

impl TemplateName {
    pub const ALL: [TemplateName; 6] = [
        TemplateName::Refactor,
        TemplateName::InstructionGen,
        TemplateName::InstructionTune,
        TemplateName::Inference,
        TemplateName::UpdateNode,
        TemplateName::PrependTask,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: &'static str,
}

const REFACTOR: &str = "Here is a task script written in JavaScript using GEE; please refactor it into a Python version using the Earth Engine API.";

const INSTRUCTION_GEN: &str = "Here are the used Python libraries {libraries} and the previous steps {previous_steps}. I want you to become my Expert Prompt Creator. Your goal is to help me reverse Python code into prompts. The prompt you provide should be a very detailed text description, including all necessary information, such as exact parameter values, input files, date, location, etc. Provide the prompt for this step's code {code} in the format { 'prompt': detailed prompts with all parameters and values }.";

const INSTRUCTION_TUNE: &str = "I will give you a task description that needs to use some of the given library {library} to implement it. You need to provide the Python code for the given task description. Here is the previous code {previous_code}. Please provide the Python code for the current step with this description.";

const INFERENCE: &str = "I want you to become my expert programmer. Your goal is to help me write Python code for the given task using the Python library {library}. You need to write code according to the detailed prompt {prompt}. Please provide the corresponding code.";

const UPDATE_NODE: &str = "Your goal is to fix the error in the initial prompt. I first give you the Python code {code}. Give your solution for fixing the error {error} and add it to the initial prompt.";

const PREPEND_TASK: &str = "Defining the undefined variables for the next step task: {next_instruction}. Give your code for the undefined variables in this step:";

static SLOT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template `{template:?}` needs slot `{slot}`")]
    MissingSlot { template: TemplateName, slot: String },
    #[error("template `{template:?}` has no slot `{slot}`")]
    UnknownSlot { template: TemplateName, slot: String },
    #[error("code to summarize is empty")]
    EmptyCode,
    #[error("summarizer returned an empty instruction")]
    EmptySummary,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl PromptTemplate {
    pub fn get(name: TemplateName) -> Self {
        let body = match name {
            TemplateName::Refactor => REFACTOR,
            TemplateName::InstructionGen => INSTRUCTION_GEN,
            TemplateName::InstructionTune => INSTRUCTION_TUNE,
            TemplateName::Inference => INFERENCE,
            TemplateName::UpdateNode => UPDATE_NODE,
            TemplateName::PrependTask => PREPEND_TASK,
        };
        Self { name, body }
    }

    /// Slot names in order of first appearance.
    pub fn slots(&self) -> Vec<&'static str> {
        let mut seen = BTreeSet::new();
        SLOT.captures_iter(self.body)
            .map(|c| c.get(1).unwrap().as_str())
            .filter(|s| seen.insert(*s))
            .collect()
    }

    pub fn render(&self, slots: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let wanted = self.slots();
        if let Some(extra) = slots.keys().find(|k| !wanted.contains(k)) {
            return Err(PromptError::UnknownSlot {
                template: self.name,
                slot: extra.to_string(),
            });
        }
        if let Some(missing) = wanted.iter().find(|s| !slots.contains_key(*s)) {
            return Err(PromptError::MissingSlot {
                template: self.name,
                slot: missing.to_string(),
            });
        }
        // single pass, so slot-like text inside values is left alone
        Ok(SLOT
            .replace_all(self.body, |c: &regex::Captures| slots[&c[1]].clone())
            .into_owned())
    }
}

pub fn render_prompt(name: TemplateName, slots: &[(&str, &str)]) -> Result<String, PromptError> {
    let map: BTreeMap<&str, String> = slots.iter().map(|(k, v)| (*k, v.to_string())).collect();
    PromptTemplate::get(name).render(&map)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSummary {
    /// Description of the summarized cell.
    pub step: String,
    /// All descriptions so far, this one last.
    pub history: Vec<String>,
}

/// Pulls the instruction out of a `{ 'prompt': ... }` reply; falls back to the
/// whole reply when it is not in that shape.
pub fn parse_prompt_reply(reply: &str) -> String {
    static PROMPT: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r#"(?s)['"]prompt['"]\s*:\s*(.*)"#).unwrap()
    });
    let text = match PROMPT.captures(reply) {
        Some(c) => c.get(1).unwrap().as_str(),
        None => reply,
    };
    let mut text = text.trim();
    if let Some(stripped) = text.strip_suffix('}') {
        text = stripped.trim_end();
    }
    text.trim_matches(|c| c == '\'' || c == '"').trim().to_string()
}

/// Summarizes one code cell into a step instruction.
pub fn generate_instruction(
    gateway: &LlmGateway,
    params: SamplingParams,
    libraries: &[String],
    code: &str,
    prior: &[String],
) -> Result<InstructionSummary, PromptError> {
    if code.trim().is_empty() {
        return Err(PromptError::EmptyCode);
    }
    let previous = if prior.is_empty() {
        "(none)".to_string()
    } else {
        prior
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}", i + 1, s))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let prompt = render_prompt(
        TemplateName::InstructionGen,
        &[
            ("libraries", &libraries.join(", ")),
            ("previous_steps", &previous),
            ("code", code),
        ],
    )?;
    let reply = gateway
        .complete(&prompt, params, 1)?
        .into_iter()
        .next()
        .map(|c| c.text)
        .unwrap_or_default();
    let step = parse_prompt_reply(&reply);
    if step.is_empty() {
        return Err(PromptError::EmptySummary);
    }
    let mut history = prior.to_vec();
    history.push(step.clone());
    Ok(InstructionSummary { step, history })
}
