use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CompletionRequest, CompletionResponse, LlmProvider, ProviderCandidate, ProviderError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedCandidate {
    Text(String),
    Scored {
        text: String,
        #[serde(default)]
        token_logprobs: Option<Vec<f64>>,
    },
}

impl ScriptedCandidate {
    fn to_provider(&self) -> ProviderCandidate {
        match self {
            ScriptedCandidate::Text(text) => ProviderCandidate {
                text: text.clone(),
                token_logprobs: None,
            },
            ScriptedCandidate::Scored {
                text,
                token_logprobs,
            } => ProviderCandidate {
                text: text.clone(),
                token_logprobs: token_logprobs.clone(),
            },
        }
    }
}

/// One canned reply. It answers the first prompt that contains every
/// `match` substring and none of the `exclude` substrings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match", default)]
    pub matches: Vec<String>,
    #[serde(default)]
    pub exclude: Vec<String>,
    pub candidates: Vec<ScriptedCandidate>,
    /// Reusable entries are never consumed.
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptEntry {
    pub fn new<I, S>(matches: I, candidates: Vec<ScriptedCandidate>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            matches: matches.into_iter().map(Into::into).collect(),
            exclude: Vec::new(),
            candidates,
            repeat: false,
        }
    }

    pub fn excluding<I, S>(mut self, exclude: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.exclude = exclude.into_iter().map(Into::into).collect();
        self
    }

    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    fn accepts(&self, prompt: &str) -> bool {
        self.matches.iter().all(|m| prompt.contains(m.as_str()))
            && !self.exclude.iter().any(|x| prompt.contains(x.as_str()))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    entries: Vec<ScriptEntry>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed script at `{path}`: {message}")]
    Format { path: String, message: String },
}

struct ScriptState {
    consumed: Vec<bool>,
    prompts: Vec<String>,
}

/// Replays canned completions; deterministic by construction.
pub struct ScriptedProvider {
    entries: Vec<ScriptEntry>,
    state: Mutex<ScriptState>,
}

impl ScriptedProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let consumed = vec![false; entries.len()];
        Self {
            entries,
            state: Mutex::new(ScriptState {
                consumed,
                prompts: Vec::new(),
            }),
        }
    }

    /// A provider answering every prompt with the same texts.
    pub fn always<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let candidates = texts
            .into_iter()
            .map(|t| ScriptedCandidate::Text(t.into()))
            .collect();
        Self::new(vec![ScriptEntry::new(Vec::<String>::new(), candidates).repeating()])
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScriptFile = serde_path_to_error::deserialize(de).map_err(|e| ScriptError::Format {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Ok(Self::new(file.entries))
    }

    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Every prompt received so far, in order.
    pub fn prompts(&self) -> Vec<String> {
        self.state.lock().unwrap().prompts.clone()
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().unwrap();
        self.entries
            .iter()
            .zip(&state.consumed)
            .filter(|(e, c)| !e.repeat && !**c)
            .count()
    }
}

impl LlmProvider for ScriptedProvider {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let mut state = self.state.lock().unwrap();
        state.prompts.push(request.prompt.clone());
        let hit = self
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| !state.consumed[*i] && e.accepts(&request.prompt))
            .map(|(i, _)| i);
        let Some(i) = hit else {
            let head: String = request.prompt.chars().take(80).collect();
            return Err(ProviderError::Refused(format!("no scripted reply for prompt `{head}`")));
        };
        let entry = &self.entries[i];
        if !entry.repeat {
            state.consumed[i] = true;
        }
        Ok(CompletionResponse {
            candidates: entry
                .candidates
                .iter()
                .take(request.n)
                .map(ScriptedCandidate::to_provider)
                .collect(),
        })
    }
}
