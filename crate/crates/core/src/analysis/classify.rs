use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Output diverges from the instruction; only detectable against gold code.
    InstructionFollowing,
    ApiHallucination,
    UndefinedVariable,
    LackOfInformation,
    Syntax,
    Timeout,
    General,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorClass {
    pub class: ErrorKind,
    /// Final traceback line the class was derived from.
    pub evidence: String,
}

/// Where the failure surfaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Parse,
    Runtime,
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("malformed classifier rules: {0}")]
    Format(#[from] serde_json::Error),
    #[error("bad message pattern `{pattern}`: {source}")]
    Pattern {
        pattern: String,
        source: regex::Error,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RulesFile {
    syntax_types: Vec<String>,
    exception_types: BTreeMap<String, ErrorKind>,
    message_patterns: Vec<PatternRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternRule {
    pattern: String,
    class: ErrorKind,
}

/// Guest-runtime specific exception names and message patterns, loaded from
/// a rules file so no runtime strings live in code.
#[derive(Debug, Clone)]
pub struct ClassifierRules {
    syntax_types: Vec<String>,
    exception_types: BTreeMap<String, ErrorKind>,
    message_patterns: Vec<(Regex, ErrorKind)>,
}

const DEFAULT_RULES: &str = include_str!("default_rules.json");

static DEFAULT: LazyLock<ClassifierRules> =
    LazyLock::new(|| ClassifierRules::from_json(DEFAULT_RULES).expect("bundled rules are valid"));

impl Default for ClassifierRules {
    fn default() -> Self {
        DEFAULT.clone()
    }
}

impl ClassifierRules {
    pub fn from_json(text: &str) -> Result<Self, RulesError> {
        let file: RulesFile = serde_json::from_str(text)?;
        let message_patterns = file
            .message_patterns
            .into_iter()
            .map(|rule| {
                Regex::new(&rule.pattern)
                    .map(|re| (re, rule.class))
                    .map_err(|source| RulesError::Pattern {
                        pattern: rule.pattern,
                        source,
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            syntax_types: file.syntax_types,
            exception_types: file.exception_types,
            message_patterns,
        })
    }

    pub fn bundled_json() -> &'static str {
        DEFAULT_RULES
    }

    /// Syntax family, then exact exception type, then message patterns in
    /// file order, then `general`.
    pub fn classify(&self, exception_type: &str, message: &str, phase: Phase) -> ErrorClass {
        let evidence = if message.is_empty() {
            exception_type.to_string()
        } else {
            format!("{exception_type}: {message}")
        };
        let class = if phase == Phase::Parse || self.syntax_types.iter().any(|t| t == exception_type)
        {
            ErrorKind::Syntax
        } else if let Some(kind) = self.exception_types.get(exception_type) {
            *kind
        } else {
            self.message_patterns
                .iter()
                .find(|(re, _)| re.is_match(&evidence))
                .map(|(_, kind)| *kind)
                .unwrap_or(ErrorKind::General)
        };
        ErrorClass { class, evidence }
    }
}

/// Classifies with the bundled rule table.
pub fn classify_error(exception_type: &str, message: &str, phase: Phase) -> ErrorClass {
    DEFAULT.classify(exception_type, message, phase)
}
