//! Pool of sandbox worker processes.
//!
//! Each worker is a child process speaking newline-delimited JSON on its
//! standard streams, one task in flight at a time. The broker enforces the
//! wall-clock deadline itself and replaces workers that time out, crash or
//! break protocol.

mod protocol;
pub mod stub;

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use protocol::{TaskKind, WireRequest, WireResponse};

/// Largest accepted program text.
pub const MAX_CODE_BYTES: usize = 1 << 20;
/// Bytes kept from the end of each output stream.
pub const TAIL_BYTES: usize = 8 * 1024;
/// Slack granted on top of a task's own timeout before the broker kills the
/// worker.
pub const GRACE: Duration = Duration::from_secs(2);
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("invalid task: {0}")]
    InvalidInput(String),
    #[error("broker is shut down")]
    Unavailable,
    #[error("failed to start worker `{cmd}`: {source}")]
    Spawn {
        cmd: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{kind:?} task failed with status {status}")]
    Failed { kind: TaskKind, status: ExecStatus },
    #[error("worker protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    ExecError,
    Timeout,
    WorkerCrash,
}

impl std::fmt::Display for ExecStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecStatus::Ok => "ok",
            ExecStatus::ExecError => "exec_error",
            ExecStatus::Timeout => "timeout",
            ExecStatus::WorkerCrash => "worker_crash",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTask {
    pub task_id: String,
    pub kind: TaskKind,
    pub code: String,
    pub timeout_s: f64,
}

static NEXT_TASK: AtomicU64 = AtomicU64::new(0);

impl ExecutionTask {
    pub fn new(kind: TaskKind, code: impl Into<String>) -> Self {
        Self {
            task_id: format!("task-{}", NEXT_TASK.fetch_add(1, Ordering::Relaxed)),
            kind,
            code: code.into(),
            timeout_s: DEFAULT_TIMEOUT_S,
        }
    }

    pub fn timeout(mut self, seconds: f64) -> Self {
        self.timeout_s = seconds;
        self
    }

    fn validate(&self) -> Result<(), BrokerError> {
        if self.code.trim().is_empty() {
            return Err(BrokerError::InvalidInput("code is empty".into()));
        }
        if self.code.len() > MAX_CODE_BYTES {
            return Err(BrokerError::InvalidInput(format!(
                "code is {} bytes, limit is {MAX_CODE_BYTES}",
                self.code.len()
            )));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(BrokerError::InvalidInput("timeout_s must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionResult {
    pub task_id: String,
    pub status: ExecStatus,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub artifact: Option<Vec<u8>>,
    pub final_print: Option<String>,
    pub wall_ms: u64,
}

impl ExecutionResult {
    fn failed(task_id: &str, status: ExecStatus, stderr: String, wall_ms: u64) -> Self {
        Self {
            task_id: task_id.to_string(),
            status,
            stdout_tail: String::new(),
            stderr_tail: tail(&stderr),
            artifact: None,
            final_print: None,
            wall_ms,
        }
    }
}

/// Last nonempty line of `stdout`, trimmed.
pub fn last_nonempty_line(stdout: &str) -> Option<String> {
    stdout
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .map(str::to_owned)
}

fn tail(s: &str) -> String {
    if s.len() <= TAIL_BYTES {
        return s.to_string();
    }
    let mut start = s.len() - TAIL_BYTES;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    s[start..].to_string()
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Default)]
struct PoolState {
    idle: Vec<Worker>,
    live: usize,
    shutdown: bool,
}

/// Fixed-size worker pool. Safe to share across threads.
pub struct Broker {
    cmd: Vec<String>,
    size: usize,
    state: Mutex<PoolState>,
    cv: Condvar,
    spawned: AtomicU64,
    replaced: AtomicU64,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("cmd", &self.cmd)
            .field("size", &self.size)
            .finish_non_exhaustive()
    }
}

impl Broker {
    /// Starts `size` workers running `cmd` (program followed by arguments).
    pub fn start(cmd: Vec<String>, size: usize) -> Result<Self, BrokerError> {
        if cmd.is_empty() {
            return Err(BrokerError::InvalidInput("worker command is empty".into()));
        }
        if size == 0 {
            return Err(BrokerError::InvalidInput("pool size must be ≥ 1".into()));
        }
        let broker = Self {
            cmd,
            size,
            state: Mutex::new(PoolState::default()),
            cv: Condvar::new(),
            spawned: AtomicU64::new(0),
            replaced: AtomicU64::new(0),
        };
        let mut workers = Vec::with_capacity(size);
        for _ in 0..size {
            workers.push(broker.spawn()?);
        }
        {
            let mut st = broker.state.lock().unwrap();
            st.live = workers.len();
            st.idle = workers;
        }
        Ok(broker)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Workers currently alive, busy or idle.
    pub fn live_workers(&self) -> usize {
        self.state.lock().unwrap().live
    }

    /// Workers replaced after a timeout, crash or protocol violation.
    pub fn replacements(&self) -> u64 {
        self.replaced.load(Ordering::Relaxed)
    }

    pub fn spawned(&self) -> u64 {
        self.spawned.load(Ordering::Relaxed)
    }

    fn spawn(&self) -> Result<Worker, BrokerError> {
        let mut child = Command::new(&self.cmd[0])
            .args(&self.cmd[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|source| BrokerError::Spawn {
                cmd: self.cmd.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        self.spawned.fetch_add(1, Ordering::Relaxed);
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }

    fn checkout(&self) -> Result<Worker, BrokerError> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.shutdown {
                return Err(BrokerError::Unavailable);
            }
            if let Some(w) = st.idle.pop() {
                return Ok(w);
            }
            if st.live < self.size {
                // a previous replacement failed; try again now
                st.live += 1;
                drop(st);
                return self.spawn().inspect_err(|_| {
                    self.state.lock().unwrap().live -= 1;
                    self.cv.notify_one();
                });
            }
            st = self.cv.wait(st).unwrap();
        }
    }

    fn checkin(&self, w: Worker) {
        let mut st = self.state.lock().unwrap();
        if st.shutdown {
            st.live -= 1;
            drop(st);
            w.kill();
        } else {
            st.idle.push(w);
            drop(st);
        }
        self.cv.notify_one();
    }

    /// Kills `w` and starts its replacement before returning.
    fn replace(&self, w: Worker) {
        w.kill();
        self.replaced.fetch_add(1, Ordering::Relaxed);
        {
            let mut st = self.state.lock().unwrap();
            st.live -= 1;
            if st.shutdown {
                drop(st);
                self.cv.notify_all();
                return;
            }
            st.live += 1;
        }
        match self.spawn() {
            Ok(fresh) => self.checkin(fresh),
            Err(e) => {
                log::warn!("worker respawn failed: {e}");
                self.state.lock().unwrap().live -= 1;
                self.cv.notify_one();
            }
        }
    }

    /// Runs one task, blocking until it resolves or its deadline passes.
    pub fn submit(&self, task: &ExecutionTask) -> Result<ExecutionResult, BrokerError> {
        task.validate()?;
        let mut worker = self.checkout()?;
        let started = Instant::now();
        let elapsed_ms = || started.elapsed().as_millis() as u64;

        let request = WireRequest {
            task_id: task.task_id.clone(),
            kind: task.kind,
            code: task.code.clone(),
            timeout_s: task.timeout_s,
        };
        let mut line = serde_json::to_string(&request).expect("request serializes");
        line.push('\n');
        if worker
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| worker.stdin.flush())
            .is_err()
        {
            self.replace(worker);
            return Ok(ExecutionResult::failed(
                &task.task_id,
                ExecStatus::WorkerCrash,
                "worker closed its input".into(),
                elapsed_ms(),
            ));
        }

        let deadline = Duration::from_secs_f64(task.timeout_s) + GRACE;
        let reply = match worker.lines.recv_timeout(deadline) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => {
                self.replace(worker);
                return Ok(ExecutionResult::failed(
                    &task.task_id,
                    ExecStatus::Timeout,
                    format!(
                        "killed after {:.1} s without a response",
                        deadline.as_secs_f64()
                    ),
                    elapsed_ms(),
                ));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let code = worker.child.wait().ok().and_then(|s| s.code());
                self.replace(worker);
                return Ok(ExecutionResult::failed(
                    &task.task_id,
                    ExecStatus::WorkerCrash,
                    format!("worker exited (code {code:?}) before responding"),
                    elapsed_ms(),
                ));
            }
        };

        let parsed: Result<WireResponse, _> = serde_json::from_str(&reply);
        let resp = match parsed {
            Ok(r) if r.task_id == task.task_id => r,
            Ok(r) => {
                self.replace(worker);
                return Ok(ExecutionResult::failed(
                    &task.task_id,
                    ExecStatus::WorkerCrash,
                    format!(
                        "response for task {:?}, expected {:?}",
                        r.task_id, task.task_id
                    ),
                    elapsed_ms(),
                ));
            }
            Err(e) => {
                self.replace(worker);
                return Ok(ExecutionResult::failed(
                    &task.task_id,
                    ExecStatus::WorkerCrash,
                    format!("unparseable response: {e}"),
                    elapsed_ms(),
                ));
            }
        };

        let mut status = match resp.status.as_str() {
            "ok" => ExecStatus::Ok,
            "exec_error" => ExecStatus::ExecError,
            "timeout" => ExecStatus::Timeout,
            _ => ExecStatus::WorkerCrash,
        };
        if matches!(status, ExecStatus::Timeout | ExecStatus::WorkerCrash) {
            self.replace(worker);
        } else {
            self.checkin(worker);
        }

        let mut stderr_tail = tail(&resp.stderr);
        let mut artifact = None;
        if task.kind == TaskKind::Render && status == ExecStatus::Ok {
            let decoded = resp
                .artifact_b64
                .as_deref()
                .and_then(|b| base64::engine::general_purpose::STANDARD.decode(b).ok())
                .filter(|bytes| image::load_from_memory(bytes).is_ok());
            match decoded {
                Some(bytes) => artifact = Some(bytes),
                None => {
                    status = ExecStatus::ExecError;
                    stderr_tail = tail(&format!("{stderr_tail}\nno decodable image.png artifact"));
                }
            }
        }
        let final_print = match task.kind {
            TaskKind::Script => last_nonempty_line(&resp.stdout),
            TaskKind::Render => None,
        };
        if task.kind == TaskKind::Script && status == ExecStatus::Ok && final_print.is_none() {
            return Err(BrokerError::Protocol(format!(
                "script task {} succeeded without printing anything",
                task.task_id
            )));
        }
        Ok(ExecutionResult {
            task_id: task.task_id.clone(),
            status,
            stdout_tail: tail(&resp.stdout),
            stderr_tail,
            artifact,
            final_print,
            wall_ms: elapsed_ms(),
        })
    }

    /// Renders a chart program and returns the PNG bytes.
    pub fn render_chart(&self, code: &str) -> Result<Vec<u8>, BrokerError> {
        let res = self.submit(&ExecutionTask::new(TaskKind::Render, code))?;
        match (res.status, res.artifact) {
            (ExecStatus::Ok, Some(bytes)) => Ok(bytes),
            (status, _) => Err(BrokerError::Failed {
                kind: TaskKind::Render,
                status,
            }),
        }
    }

    /// Runs an answer script and returns its final printed line.
    pub fn run_script(&self, code: &str) -> Result<String, BrokerError> {
        let res = self.submit(&ExecutionTask::new(TaskKind::Script, code))?;
        match (res.status, res.final_print) {
            (ExecStatus::Ok, Some(line)) => Ok(line),
            (status, _) => Err(BrokerError::Failed {
                kind: TaskKind::Script,
                status,
            }),
        }
    }

    /// Stops accepting tasks and kills idle workers. Busy workers are killed
    /// when their task returns.
    pub fn shutdown(&self) {
        let idle = {
            let mut st = self.state.lock().unwrap();
            st.shutdown = true;
            st.live -= st.idle.len();
            std::mem::take(&mut st.idle)
        };
        self.cv.notify_all();
        for w in idle {
            w.kill();
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_line_rule() {
        assert_eq!(
            last_nonempty_line("banner\n7.5\n\n  \n").as_deref(),
            Some("7.5")
        );
        assert_eq!(
            last_nonempty_line("  Region A \n").as_deref(),
            Some("Region A")
        );
        assert_eq!(last_nonempty_line("\n \n"), None);
    }

    #[test]
    fn tail_keeps_last_bytes_on_char_boundary() {
        let s = "é".repeat(TAIL_BYTES);
        let t = tail(&s);
        assert!(t.len() <= TAIL_BYTES);
        assert!(s.ends_with(&t));
        assert_eq!(tail("short"), "short");
    }

    #[test]
    fn task_validation() {
        assert!(ExecutionTask::new(TaskKind::Script, "  ")
            .validate()
            .is_err());
        assert!(ExecutionTask::new(TaskKind::Script, "x")
            .timeout(0.0)
            .validate()
            .is_err());
        let big = "x".repeat(MAX_CODE_BYTES + 1);
        assert!(ExecutionTask::new(TaskKind::Render, big)
            .validate()
            .is_err());
        assert!(ExecutionTask::new(TaskKind::Render, "x").validate().is_ok());
    }

    #[test]
    fn missing_executable_fails_to_start() {
        let err = Broker::start(vec!["/nonexistent/worker-bin".into()], 1).unwrap_err();
        assert!(matches!(err, BrokerError::Spawn { .. }));
    }
}
