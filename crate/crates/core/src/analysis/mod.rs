//! Static analysis of guest (Python) code and execution failures.
//!
//! Parsing is delegated to `rustpython-parser`; everything built on top of the
//! syntax tree (call labels, scopes, receivers) lives here.

mod blocks;
mod classify;
mod hints;
mod labels;
mod scope;
mod walk;

pub use blocks::{normalize_code, split_blocks};
pub use classify::{classify_error, ClassifierRules, ErrorClass, ErrorKind, Phase, RulesError};
pub use hints::{suggest_fix, undefined_names_in_message, FixHint, FixHintKind};
pub use labels::{attribute_receivers, extract_call_labels, missing_attribute, CallLabel, LabelMode};
pub use scope::{bound_names, find_undefined_names, GUEST_BUILTINS};

use rustpython_parser::{ast, Parse};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub message: String,
    pub line: usize,
}

pub(crate) fn parse_module(code: &str) -> Result<ast::Suite, ParseError> {
    ast::Suite::parse(code, "<cell>").map_err(|e| {
        let offset = usize::from(e.offset).min(code.len());
        let line = code.as_bytes()[..offset].iter().filter(|b| **b == b'\n').count() + 1;
        ParseError {
            message: e.error.to_string(),
            line,
        }
    })
}

/// True when `code` parses in the guest grammar.
pub fn parses(code: &str) -> bool {
    parse_module(code).is_ok()
}

/// Parses `code`, reporting the first syntax error.
pub fn parse_check(code: &str) -> Result<(), ParseError> {
    parse_module(code).map(|_| ())
}
