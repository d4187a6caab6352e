use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::classify::ErrorKind;
use crate::sandbox::ExecutionOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixHintKind {
    AccessibleApiList,
    DefineVariables,
    TracebackAdvice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixHint {
    pub kind: FixHintKind,
    pub payload: String,
}

impl FixHint {
    /// Text inserted into the repair prompt.
    pub fn render(&self) -> String {
        match self.kind {
            FixHintKind::AccessibleApiList => format!(
                "The requested attribute does not exist. Accessible attributes of the object: {}. Use one of these.",
                self.payload
            ),
            FixHintKind::DefineVariables => {
                format!("Define these variables before using them: {}.", self.payload)
            }
            FixHintKind::TracebackAdvice => format!(
                "Locate the failing statement from the traceback and fix it: {}",
                self.payload
            ),
        }
    }
}

/// Variable names mentioned by name-resolution error messages.
pub fn undefined_names_in_message(message: &str) -> Vec<String> {
    static PAT: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?:name|local variable|free variable) '([A-Za-z_][A-Za-z0-9_]*)'").unwrap()
    });
    let mut names: Vec<String> = PAT.captures_iter(message).map(|c| c[1].to_string()).collect();
    names.dedup();
    names
}

/// Turns a failed outcome (and, for attribute errors, the receiver's real
/// member names) into a repair hint.
pub fn suggest_fix(outcome: &ExecutionOutcome, introspection: Option<&[String]>) -> FixHint {
    let final_line = outcome.final_line();
    let kind = outcome.error_class.as_ref().map(|c| c.class);
    if kind == Some(ErrorKind::ApiHallucination) {
        if let Some(names) = introspection.filter(|n| !n.is_empty()) {
            let public: Vec<&str> = names
                .iter()
                .map(String::as_str)
                .filter(|n| !n.starts_with('_'))
                .collect();
            let listed = if public.is_empty() {
                names.join(", ")
            } else {
                public.join(", ")
            };
            return FixHint {
                kind: FixHintKind::AccessibleApiList,
                payload: listed,
            };
        }
    }
    if kind == Some(ErrorKind::UndefinedVariable) {
        let message = outcome
            .traceback
            .as_ref()
            .map(|t| t.message.as_str())
            .unwrap_or_default();
        let names = undefined_names_in_message(message);
        if !names.is_empty() {
            return FixHint {
                kind: FixHintKind::DefineVariables,
                payload: names.join(", "),
            };
        }
    }
    FixHint {
        kind: FixHintKind::TracebackAdvice,
        payload: final_line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{classify_error, Phase};
    use crate::sandbox::{OutcomeStatus, Traceback};

    fn failure(etype: &str, message: &str) -> ExecutionOutcome {
        ExecutionOutcome {
            status: OutcomeStatus::Fail,
            stdout: String::new(),
            stderr: String::new(),
            traceback: Some(Traceback {
                exception_type: etype.into(),
                message: message.into(),
                frames: Vec::new(),
            }),
            duration_ms: 1,
            error_class: Some(classify_error(etype, message, Phase::Runtime)),
        }
    }

    #[test]
    fn api_list_from_introspection() {
        let outcome = failure("AttributeError", "'FeatureCollection' object has no attribute 'clip'");
        let names: Vec<String> = ["__class__", "filter", "first", "map"].iter().map(|s| s.to_string()).collect();
        let hint = suggest_fix(&outcome, Some(&names));
        assert_eq!(hint.kind, FixHintKind::AccessibleApiList);
        assert_eq!(hint.payload, "filter, first, map");
        // without introspection the traceback is quoted instead
        assert_eq!(suggest_fix(&outcome, None).kind, FixHintKind::TracebackAdvice);
    }

    #[test]
    fn define_variables() {
        let hint = suggest_fix(&failure("NameError", "name 'startDate' is not defined"), None);
        assert_eq!(hint.kind, FixHintKind::DefineVariables);
        assert_eq!(hint.payload, "startDate");
    }

    #[test]
    fn traceback_advice_quotes_last_line() {
        let hint = suggest_fix(&failure("ZeroDivisionError", "division by zero"), None);
        assert_eq!(hint.kind, FixHintKind::TracebackAdvice);
        assert_eq!(hint.payload, "ZeroDivisionError: division by zero");
    }

    #[test]
    fn message_names() {
        assert_eq!(
            undefined_names_in_message("local variable 'n' referenced before assignment"),
            vec!["n"]
        );
        assert!(undefined_names_in_message("boom").is_empty());
    }
}
