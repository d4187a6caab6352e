//! Guest-runtime sessions: one child process per session, driven over the
//! line protocol in [`protocol`].

pub mod protocol;
mod session;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{ErrorClass, ErrorKind};

pub use session::{RunnerConfig, Session, SessionState, BUNDLED_SHIM};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub file: String,
    pub line: u32,
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traceback {
    pub exception_type: String,
    pub message: String,
    pub frames: Vec<Frame>,
}

impl Traceback {
    pub fn final_line(&self) -> String {
        if self.message.is_empty() {
            self.exception_type.clone()
        } else {
            format!("{}: {}", self.exception_type, self.message)
        }
    }

    /// Python-style rendering for prompts and reports.
    pub fn render(&self) -> String {
        let mut out = String::from("Traceback (most recent call last):\n");
        for f in &self.frames {
            out.push_str(&format!("  File \"{}\", line {}, in {}\n", f.file, f.line, f.name));
            if !f.text.is_empty() {
                out.push_str(&format!("    {}\n", f.text.trim()));
            }
        }
        out.push_str(&self.final_line());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: OutcomeStatus,
    pub stdout: String,
    pub stderr: String,
    pub traceback: Option<Traceback>,
    pub duration_ms: u64,
    pub error_class: Option<ErrorClass>,
}

impl ExecutionOutcome {
    pub fn pass(stdout: String, stderr: String, duration_ms: u64) -> Self {
        Self {
            status: OutcomeStatus::Pass,
            stdout,
            stderr,
            traceback: None,
            duration_ms,
            error_class: None,
        }
    }

    /// Failure not produced by the guest runtime itself (parse rejection,
    /// client-side timeout, dead process).
    pub fn synthetic_failure(exception_type: &str, message: &str, class: ErrorKind) -> Self {
        let traceback = Traceback {
            exception_type: exception_type.to_string(),
            message: message.to_string(),
            frames: Vec::new(),
        };
        Self {
            status: OutcomeStatus::Fail,
            stdout: String::new(),
            stderr: String::new(),
            error_class: Some(ErrorClass {
                class,
                evidence: traceback.final_line(),
            }),
            traceback: Some(traceback),
            duration_ms: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == OutcomeStatus::Pass
    }

    pub fn error_kind(&self) -> Option<ErrorKind> {
        self.error_class.as_ref().map(|c| c.class)
    }

    /// Last traceback line, or empty for passing outcomes.
    pub fn final_line(&self) -> String {
        self.traceback
            .as_ref()
            .map(Traceback::final_line)
            .unwrap_or_default()
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to spawn runner `{program}`: {source}")]
    Spawn {
        program: String,
        source: std::io::Error,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("protocol version mismatch: client speaks {expected}, runner reported {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("session is dead")]
    SessionDead,
    #[error("introspection failed: {}", .0.final_line())]
    Introspection(Traceback),
}

/// One exclusively-owned guest namespace.
pub trait GuestSession: Send {
    fn execute(&mut self, code: &str, timeout: Duration) -> Result<ExecutionOutcome, SandboxError>;
    fn introspect_attrs(&mut self, expr: &str) -> Result<Vec<String>, SandboxError>;
    fn introspect_names(&mut self) -> Result<Vec<String>, SandboxError>;
    fn reset(&mut self) -> Result<(), SandboxError>;
    fn close(&mut self);
}

fn session_alive(session: &mut dyn GuestSession) -> bool {
    session.introspect_names().is_ok()
}

/// Opens fresh sessions.
pub trait SandboxFactory: Send + Sync {
    fn open(&self) -> Result<Box<dyn GuestSession>, SandboxError>;
}

/// Executes `cells` in order in a fresh session, returning one outcome per
/// cell. Failing cells do not stop the replay; once a timeout has killed the
/// session the remaining cells are reported as failed.
pub fn replay(
    factory: &dyn SandboxFactory,
    cells: &[&str],
    timeout: Duration,
) -> Result<Vec<ExecutionOutcome>, SandboxError> {
    let mut session = factory.open()?;
    let mut outcomes: Vec<ExecutionOutcome> = Vec::with_capacity(cells.len());
    let mut killed = false;
    for cell in cells {
        if killed {
            outcomes.push(ExecutionOutcome::synthetic_failure(
                "SessionDied",
                "session was killed by an earlier timeout",
                ErrorKind::General,
            ));
            continue;
        }
        match session.execute(cell, timeout) {
            Ok(outcome) => {
                killed = outcome.error_kind() == Some(ErrorKind::Timeout) && !session_alive(&mut *session);
                outcomes.push(outcome);
            }
            Err(e) => {
                session.close();
                return Err(e);
            }
        }
    }
    session.close();
    Ok(outcomes)
}
