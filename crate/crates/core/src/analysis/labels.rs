use std::collections::BTreeSet;
use std::fmt;

use regex::Regex;
use rustpython_parser::ast::{Expr, Ranged};
use serde::{Deserialize, Serialize};

use super::walk::for_each_expr;
use super::{parse_module, ParseError};

/// Callee name referenced by generated code. Dotted when the call target is
/// an attribute chain rooted at an identifier (`ee.Filter.lte`), bare otherwise.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallLabel(pub String);

impl CallLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    /// Final segment of the chain.
    pub fn bare(&self) -> CallLabel {
        CallLabel(self.0.rsplit('.').next().unwrap_or(&self.0).to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CallLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CallLabel {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Dotted,
    Bare,
}

impl LabelMode {
    pub fn apply(self, label: &CallLabel) -> CallLabel {
        match self {
            LabelMode::Dotted => label.clone(),
            LabelMode::Bare => label.bare(),
        }
    }
}

/// Methods whose first positional argument is a function reference
/// (`collection.map(mask_clouds)`); that reference counts as a called
/// function.
const HIGHER_ORDER: &[&str] = &["map", "apply", "applymap", "iterate", "forEach"];

/// `a.b.c` for identifier-rooted attribute chains.
fn dotted_chain(e: &Expr) -> Option<String> {
    match e {
        Expr::Name(n) => Some(n.id.to_string()),
        Expr::Attribute(a) => dotted_chain(&a.value).map(|base| format!("{base}.{}", a.attr)),
        _ => None,
    }
}

fn callee_label(func: &Expr) -> Option<String> {
    match func {
        Expr::Name(n) => Some(n.id.to_string()),
        Expr::Attribute(a) => Some(dotted_chain(func).unwrap_or_else(|| a.attr.to_string())),
        _ => None,
    }
}

pub fn extract_call_labels(code: &str) -> Result<BTreeSet<CallLabel>, ParseError> {
    let module = parse_module(code)?;
    let mut labels = BTreeSet::new();
    for_each_expr(&module, &mut |e| {
        let Expr::Call(call) = e else { return };
        let Some(label) = callee_label(&call.func) else {
            return;
        };
        let last = label.rsplit('.').next().unwrap_or(&label);
        if HIGHER_ORDER.contains(&last) {
            if let Some(reference) = call.args.first().and_then(dotted_chain) {
                labels.insert(CallLabel(reference));
            }
        }
        labels.insert(CallLabel(label));
    });
    Ok(labels)
}

/// Source text of every receiver `X` in `X.attr` occurrences, in source order.
pub fn attribute_receivers(code: &str, attr: &str) -> Result<Vec<String>, ParseError> {
    let module = parse_module(code)?;
    let mut found = Vec::new();
    for_each_expr(&module, &mut |e| {
        if let Expr::Attribute(a) = e {
            if a.attr.as_str() == attr {
                let text = code[a.value.range()].trim().to_string();
                if !found.contains(&text) {
                    found.push(text);
                }
            }
        }
    });
    Ok(found)
}

/// `(owner, attribute)` from an attribute-error message such as
/// `'FeatureCollection' object has no attribute 'clip'`.
pub fn missing_attribute(message: &str) -> Option<(String, String)> {
    static PAT: std::sync::LazyLock<Regex> = std::sync::LazyLock::new(|| {
        Regex::new(r#"^(?:type object |module )?'([^']+)'(?: object)? has no attribute '([^']+)'"#)
            .unwrap()
    });
    let caps = PAT.captures(message.trim())?;
    Some((caps[1].to_string(), caps[2].to_string()))
}
