use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};

use stepforge_core::refine::{AgentError, EditOutcome};
use stepforge_core::run::{read_log, EventSink, FileSink};
use stepforge_core::{Agent, AgentConfig, Deps, HumanEdit, RunEvent, RunMode, RunState, RunStatus, TaskSpec};
use tokio::sync::{oneshot, watch};

/// Events and folded state of one run, shared between its worker and the
/// request handlers.
pub struct Shared {
    inner: Mutex<Inner>,
    notify: watch::Sender<usize>,
}

pub struct Inner {
    pub events: Vec<RunEvent>,
    pub state: Option<RunState>,
}

impl Shared {
    fn new(events: Vec<RunEvent>, state: Option<RunState>) -> Arc<Self> {
        let len = events.len();
        Arc::new(Self {
            inner: Mutex::new(Inner { events, state }),
            notify: watch::channel(len).0,
        })
    }

    pub fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("run lock poisoned")
    }

    /// Receiver that changes whenever an event is appended.
    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.notify.subscribe()
    }
}

/// Persists each event to the run's log, then publishes it.
struct ServiceSink {
    file: FileSink,
    shared: Arc<Shared>,
}

impl EventSink for ServiceSink {
    fn record(&mut self, event: &RunEvent) -> io::Result<()> {
        self.file.record(event)?;
        let mut inner = self.shared.lock();
        match inner.state.as_mut() {
            Some(state) => state
                .apply(event)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?,
            None => {
                inner.state = Some(
                    RunState::genesis(event).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?,
                )
            }
        }
        inner.events.push(event.clone());
        let len = inner.events.len();
        drop(inner);
        self.notify(len);
        Ok(())
    }
}

impl ServiceSink {
    fn notify(&self, len: usize) {
        self.shared.notify.send_replace(len);
    }
}

pub enum Command {
    Edit(HumanEdit, oneshot::Sender<Result<EditOutcome, AgentError>>),
    Cancel(oneshot::Sender<Result<(), AgentError>>),
}

pub struct RunHandle {
    pub shared: Arc<Shared>,
    commands: Mutex<Option<mpsc::Sender<Command>>>,
    cancel: Arc<AtomicBool>,
}

impl RunHandle {
    pub fn status(&self) -> Option<RunStatus> {
        self.shared.lock().state.as_ref().map(|s| s.status)
    }

    pub fn send(&self, cmd: Command) -> bool {
        match self.commands.lock().expect("command lock").as_ref() {
            Some(tx) => tx.send(cmd).is_ok(),
            None => false,
        }
    }

    /// Asks a running (not paused) run to stop at its next check.
    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }
}

fn worker(mut agent: Agent, rx: mpsc::Receiver<Command>) {
    loop {
        let status = if agent.state().status == RunStatus::Running {
            match agent.drive() {
                Ok(s) => s,
                Err(e) => {
                    tracing::error!(run = %agent.state().run_id, error = %e, "run failed");
                    agent.state().status
                }
            }
        } else {
            agent.state().status
        };
        if status.is_final() {
            break;
        }
        match rx.recv() {
            Ok(Command::Edit(edit, reply)) => {
                let _ = reply.send(agent.apply_edit(edit));
            }
            Ok(Command::Cancel(reply)) => {
                let _ = reply.send(agent.cancel());
            }
            Err(_) => break,
        }
    }
    // answer anything that raced with the end of the run
    let final_status = agent.state().status;
    while let Ok(cmd) = rx.try_recv() {
        match cmd {
            Command::Edit(_, reply) => {
                let _ = reply.send(Err(AgentError::NotRunning(final_status)));
            }
            Command::Cancel(reply) => {
                let _ = reply.send(Err(AgentError::NotRunning(final_status)));
            }
        }
    }
}

#[derive(Debug)]
pub enum CreateError {
    Duplicate(String),
    Agent(AgentError),
    Io(io::Error),
}

pub struct Registry {
    dir: PathBuf,
    deps: Arc<Deps>,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    counter: AtomicU64,
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Registry {
    /// Opens the run directory, reloading every logged run. Unfinished runs
    /// pick up where their log ends.
    pub fn open(dir: &Path, deps: Arc<Deps>) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let registry = Self {
            dir: dir.to_path_buf(),
            deps,
            runs: Mutex::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            if let Err(e) = registry.recover(&path) {
                tracing::warn!(path = %path.display(), error = %e, "skipping unreadable run log");
            }
        }
        Ok(registry)
    }

    fn recover(&self, path: &Path) -> io::Result<()> {
        let events = read_log(path)?;
        if events.is_empty() {
            return Ok(());
        }
        // rewrite so a torn final line cannot corrupt later appends
        let mut out = fs::File::create(path)?;
        for e in &events {
            out.write_all(e.to_line().as_bytes())?;
        }
        out.sync_all()?;
        let state = RunState::replay(&events).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let run_id = state.run_id.clone();
        let final_run = state.status.is_final();
        let shared = Shared::new(events.clone(), Some(state));
        let handle = if final_run {
            RunHandle {
                shared,
                commands: Mutex::new(None),
                cancel: Arc::new(AtomicBool::new(false)),
            }
        } else {
            let sink = ServiceSink {
                file: FileSink::append(path)?,
                shared: shared.clone(),
            };
            let agent = Agent::resume(&events, self.deps.clone(), Box::new(sink))
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            self.spawn(agent, shared)
        };
        tracing::info!(run = %run_id, "recovered run");
        self.runs.lock().expect("registry lock").insert(run_id, Arc::new(handle));
        Ok(())
    }

    fn spawn(&self, agent: Agent, shared: Arc<Shared>) -> RunHandle {
        let (tx, rx) = mpsc::channel();
        let cancel = agent.cancel_flag();
        let name = format!("run-{}", agent.state().run_id);
        std::thread::Builder::new()
            .name(name)
            .spawn(move || worker(agent, rx))
            .expect("spawn run worker");
        RunHandle {
            shared,
            commands: Mutex::new(Some(tx)),
            cancel,
        }
    }

    pub fn next_run_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        format!("run-{ms:x}-{n}")
    }

    pub fn log_path(&self, run_id: &str) -> PathBuf {
        self.dir.join(format!("{run_id}.jsonl"))
    }

    pub fn create(
        &self,
        run_id: String,
        task: TaskSpec,
        cfg: AgentConfig,
        mode: RunMode,
    ) -> Result<Arc<RunHandle>, CreateError> {
        let mut runs = self.runs.lock().expect("registry lock");
        let path = self.log_path(&run_id);
        if runs.contains_key(&run_id) || path.exists() {
            return Err(CreateError::Duplicate(run_id));
        }
        let shared = Shared::new(Vec::new(), None);
        let sink = ServiceSink {
            file: FileSink::append(&path).map_err(CreateError::Io)?,
            shared: shared.clone(),
        };
        let agent = match Agent::create(run_id.clone(), task, cfg, mode, self.deps.clone(), Box::new(sink)) {
            Ok(a) => a,
            Err(e) => {
                let _ = fs::remove_file(&path);
                return Err(CreateError::Agent(e));
            }
        };
        let handle = Arc::new(self.spawn(agent, shared));
        runs.insert(run_id, handle.clone());
        Ok(handle)
    }

    pub fn get(&self, run_id: &str) -> Option<Arc<RunHandle>> {
        self.runs.lock().expect("registry lock").get(run_id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.runs.lock().expect("registry lock").keys().cloned().collect()
    }
}
