use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{Op, Request, Response, ResponseStatus, WireTraceback, PROTOCOL_VERSION};
use super::{ExecutionOutcome, Frame, GuestSession, OutcomeStatus, SandboxError, SandboxFactory, Traceback};
use crate::analysis::{ClassifierRules, ErrorKind, Phase};

/// Reference kernel shim source, shipped so a runner is always available.
pub const BUNDLED_SHIM: &str = include_str!("../../shim/kernel_shim.py");

const TRUNCATION_MARKER: &str = "\n[output truncated]";
const STDERR_KEEP: usize = 64 * 1024;

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// How to launch the guest runtime.
#[derive(Debug, Clone)]
pub struct RunnerConfig {
    pub program: String,
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    pub handshake_timeout: Duration,
    /// Per-stream cap on captured guest output, in bytes.
    pub output_cap: usize,
    pub close_grace: Duration,
    pub rules: Arc<ClassifierRules>,
}

impl RunnerConfig {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            env: Vec::new(),
            handshake_timeout: Duration::from_secs(10),
            output_cap: 1 << 20,
            close_grace: Duration::from_secs(2),
            rules: Arc::new(ClassifierRules::default()),
        }
    }

    /// `python -u <shim>`.
    pub fn python_shim(python: impl Into<String>, shim: impl AsRef<Path>) -> Self {
        Self::new(
            python,
            vec!["-u".into(), shim.as_ref().display().to_string()],
        )
    }

    /// Writes the bundled shim under `dir` and returns a config running it.
    pub fn bundled(python: impl Into<String>, dir: &Path) -> std::io::Result<Self> {
        let path: PathBuf = dir.join("kernel_shim.py");
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, BUNDLED_SHIM)?;
        Ok(Self::python_shim(python, path))
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.env.push((key.into(), value.into()));
        self
    }

    pub fn with_rules(mut self, rules: ClassifierRules) -> Self {
        self.rules = Arc::new(rules);
        self
    }
}

impl SandboxFactory for RunnerConfig {
    fn open(&self) -> Result<Box<dyn GuestSession>, SandboxError> {
        Ok(Box::new(Session::open(self)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Live,
    Dead,
}

enum Wait {
    Reply(Response),
    TimedOut,
}

/// A live guest runtime process. Requests are strictly serialized.
pub struct Session {
    session_id: u64,
    version: String,
    cell_counter: u64,
    state: SessionState,
    next_request: u64,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<String>,
    stderr_tail: Arc<Mutex<String>>,
    output_cap: usize,
    close_grace: Duration,
    rules: Arc<ClassifierRules>,
}

impl Session {
    pub fn open(cfg: &RunnerConfig) -> Result<Self, SandboxError> {
        let mut command = Command::new(&cfg.program);
        command
            .args(&cfg.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        for (k, v) in &cfg.env {
            command.env(k, v);
        }
        let mut child = command.spawn().map_err(|source| SandboxError::Spawn {
            program: cfg.program.clone(),
            source,
        })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");

        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr_tail = Arc::new(Mutex::new(String::new()));
        let tail = Arc::clone(&stderr_tail);
        thread::spawn(move || {
            let mut reader = BufReader::new(stderr);
            let mut buf = [0u8; 4096];
            while let Ok(n) = reader.read(&mut buf) {
                if n == 0 {
                    break;
                }
                let mut tail = tail.lock().unwrap();
                tail.push_str(&String::from_utf8_lossy(&buf[..n]));
                if tail.len() > STDERR_KEEP {
                    let mut cut = tail.len() - STDERR_KEEP;
                    while !tail.is_char_boundary(cut) {
                        cut += 1;
                    }
                    tail.drain(..cut);
                }
            }
        });

        let mut session = Self {
            session_id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            version: String::new(),
            cell_counter: 0,
            state: SessionState::Live,
            next_request: 0,
            child,
            stdin,
            lines,
            stderr_tail,
            output_cap: cfg.output_cap,
            close_grace: cfg.close_grace,
            rules: Arc::clone(&cfg.rules),
        };
        let hello = match session.roundtrip(Request::new(0, Op::Hello), cfg.handshake_timeout) {
            Ok(Wait::Reply(r)) => r,
            Ok(Wait::TimedOut) => {
                session.kill();
                return Err(SandboxError::Handshake(format!(
                    "no hello reply within {:?}",
                    cfg.handshake_timeout
                )));
            }
            Err(SandboxError::SessionDead) => {
                let tail = session.stderr_tail();
                session.kill();
                return Err(SandboxError::Handshake(format!(
                    "runner exited during handshake: {}",
                    tail.trim()
                )));
            }
            Err(e) => {
                session.kill();
                return Err(e);
            }
        };
        let found = hello.version.unwrap_or_default();
        if found != PROTOCOL_VERSION {
            session.close();
            return Err(SandboxError::VersionMismatch {
                expected: PROTOCOL_VERSION.to_string(),
                found,
            });
        }
        session.version = found;
        Ok(session)
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn protocol_version(&self) -> &str {
        &self.version
    }

    pub fn cell_counter(&self) -> u64 {
        self.cell_counter
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    /// Recent runner stderr, for diagnostics.
    pub fn stderr_tail(&self) -> String {
        self.stderr_tail.lock().unwrap().clone()
    }

    fn roundtrip(&mut self, mut req: Request, wait: Duration) -> Result<Wait, SandboxError> {
        if self.state == SessionState::Dead {
            return Err(SandboxError::SessionDead);
        }
        req.id = self.next_request;
        self.next_request += 1;
        let line = req.to_line();
        let written = match self.stdin.as_mut() {
            Some(stdin) => stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()),
            None => Err(std::io::ErrorKind::BrokenPipe.into()),
        };
        if written.is_err() {
            self.mark_dead();
            return Err(SandboxError::SessionDead);
        }
        let deadline = Instant::now() + wait;
        let remaining = deadline.saturating_duration_since(Instant::now());
        match self.lines.recv_timeout(remaining) {
            Ok(line) => {
                let resp = Response::parse(&line).map_err(|e| {
                    SandboxError::Protocol(format!("unparseable response `{line}`: {e}"))
                })?;
                if resp.id != Some(req.id) {
                    return Err(SandboxError::Protocol(format!(
                        "response id {:?} does not match request id {}",
                        resp.id, req.id
                    )));
                }
                Ok(Wait::Reply(resp))
            }
            Err(RecvTimeoutError::Timeout) => Ok(Wait::TimedOut),
            Err(RecvTimeoutError::Disconnected) => {
                self.mark_dead();
                Err(SandboxError::SessionDead)
            }
        }
    }

    fn request(&mut self, req: Request, wait: Duration) -> Result<Response, SandboxError> {
        match self.roundtrip(req, wait)? {
            Wait::Reply(r) => Ok(r),
            Wait::TimedOut => {
                self.kill();
                Err(SandboxError::SessionDead)
            }
        }
    }

    fn cap(&self, mut text: String) -> String {
        if text.len() > self.output_cap && !text.ends_with(TRUNCATION_MARKER) {
            let mut cut = self.output_cap;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text.truncate(cut);
            text.push_str(TRUNCATION_MARKER);
        }
        text
    }

    fn to_traceback(wire: WireTraceback) -> Traceback {
        Traceback {
            exception_type: wire.etype,
            message: wire.evalue,
            frames: wire
                .frames
                .into_iter()
                .map(|f| Frame {
                    file: f.file,
                    line: f.line,
                    name: f.name,
                    text: f.text,
                })
                .collect(),
        }
    }

    fn mark_dead(&mut self) {
        self.state = SessionState::Dead;
        self.stdin = None;
    }

    fn kill(&mut self) {
        self.mark_dead();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn control_wait(&self) -> Duration {
        Duration::from_secs(10)
    }
}

impl GuestSession for Session {
    fn execute(&mut self, code: &str, timeout: Duration) -> Result<ExecutionOutcome, SandboxError> {
        let deadline_ms = timeout.as_millis().max(1) as u64;
        let mut req = Request::new(0, Op::Exec);
        req.code = Some(code.to_string());
        req.deadline_ms = Some(deadline_ms);
        // the shim enforces the deadline cooperatively; this is the hard stop
        let grace = (timeout / 2).clamp(Duration::from_millis(100), Duration::from_secs(5));
        let reply = self.roundtrip(req, timeout + grace)?;
        self.cell_counter += 1;
        let resp = match reply {
            Wait::Reply(r) => r,
            Wait::TimedOut => {
                self.kill();
                return Ok(ExecutionOutcome::synthetic_failure(
                    "DeadlineExceeded",
                    &format!("cell exceeded deadline of {deadline_ms} ms; runner killed"),
                    ErrorKind::Timeout,
                ));
            }
        };
        let stdout = self.cap(resp.stdout.unwrap_or_default());
        let stderr = self.cap(resp.stderr.unwrap_or_default());
        match (resp.status, resp.traceback) {
            (ResponseStatus::Ok, _) => Ok(ExecutionOutcome::pass(stdout, stderr, resp.duration_ms)),
            (ResponseStatus::Error, Some(tb)) => {
                let traceback = Self::to_traceback(tb);
                let error_class = self.rules.classify(
                    &traceback.exception_type,
                    &traceback.message,
                    Phase::Runtime,
                );
                Ok(ExecutionOutcome {
                    status: OutcomeStatus::Fail,
                    stdout,
                    stderr,
                    traceback: Some(traceback),
                    duration_ms: resp.duration_ms,
                    error_class: Some(error_class),
                })
            }
            (ResponseStatus::Error, None) => Err(SandboxError::Protocol(
                "error response without traceback".into(),
            )),
        }
    }

    fn introspect_attrs(&mut self, expr: &str) -> Result<Vec<String>, SandboxError> {
        let mut req = Request::new(0, Op::IntrospectAttrs);
        req.expr = Some(expr.to_string());
        let wait = self.control_wait();
        let resp = self.request(req, wait)?;
        match resp.status {
            ResponseStatus::Ok => {
                let mut names = resp.names.unwrap_or_default();
                names.sort();
                Ok(names)
            }
            ResponseStatus::Error => Err(SandboxError::Introspection(Self::to_traceback(
                resp.traceback.ok_or_else(|| {
                    SandboxError::Protocol("introspection error without traceback".into())
                })?,
            ))),
        }
    }

    fn introspect_names(&mut self) -> Result<Vec<String>, SandboxError> {
        let wait = self.control_wait();
        let resp = self.request(Request::new(0, Op::IntrospectNames), wait)?;
        let mut names = resp.names.unwrap_or_default();
        names.sort();
        Ok(names)
    }

    fn reset(&mut self) -> Result<(), SandboxError> {
        let wait = self.control_wait();
        let resp = self.request(Request::new(0, Op::Reset), wait)?;
        match resp.status {
            ResponseStatus::Ok => Ok(()),
            ResponseStatus::Error => Err(SandboxError::Protocol("reset rejected".into())),
        }
    }

    fn close(&mut self) {
        if self.state == SessionState::Dead {
            let _ = self.child.try_wait();
            return;
        }
        let grace = self.close_grace;
        let _ = self.roundtrip(Request::new(0, Op::Shutdown), grace);
        self.mark_dead();
        let deadline = Instant::now() + grace;
        loop {
            match self.child.try_wait() {
                Ok(Some(_)) => return,
                Ok(None) if Instant::now() < deadline => thread::sleep(Duration::from_millis(5)),
                _ => break,
            }
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.close();
    }
}
