//! Child-process controller hosting.
//!
//! A candidate controller runs as its own process and talks to the host over
//! stdin/stdout, one JSON object per line:
//!
//! ```text
//! host -> {"type":"init","params":{...},"grid_path":"occ.png"}
//! ctrl -> {"type":"ready"}
//! host -> {"type":"query","op":"is_occupied","args":{"x":3,"y":4}}
//! ctrl -> {"type":"result","value":true}
//! host -> {"type":"sense","t":0,"pose":[x,y,theta],"rays":[...]}
//! ctrl -> {"type":"act","vl":1.0,"vr":1.2}
//! host -> {"type":"stop"}
//! ```
//!
//! Either side may send `{"type":"error","message":...}`; a controller that
//! does not implement a query answers with `"code":"unsupported"`. Every
//! wait on the child is bounded by the session timeout.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::occgrid::Pixel;
use crate::sim2d::{Controller, Observation, WheelCommand};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_GRACE: Duration = Duration::from_millis(500);
pub const SOURCE_PLACEHOLDER: &str = "{source}";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("failed to start controller: {message}; stderr: {stderr}")]
    Spawn { message: String, stderr: String },
    #[error("controller did not report ready within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("no reply from controller within {waited:?}")]
    Timeout { waited: Duration },
    #[error("protocol error at byte {offset} of {line:?}: {message}")]
    Protocol {
        message: String,
        line: String,
        offset: usize,
    },
    #[error("controller exited{}; stderr: {stderr}", code.map(|c| format!(" with status {c}")).unwrap_or_default())]
    ChildExit { code: Option<i32>, stderr: String },
    #[error("controller does not support query {0}")]
    QueryUnsupported(String),
    #[error("controller reported error: {0}")]
    Remote(String),
    #[error("session is {0:?}; operation not allowed")]
    InvalidState(SessionState),
    #[error("runner command template must contain {SOURCE_PLACEHOLDER}: {0:?}")]
    BadTemplate(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    fn protocol(message: impl Into<String>, line: &str, offset: usize) -> Self {
        HarnessError::Protocol {
            message: message.into(),
            line: line.to_string(),
            offset,
        }
    }
}

/// Wire messages. Field names are part of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Init {
        params: Value,
        grid_path: String,
    },
    Ready,
    Sense {
        t: u32,
        pose: [f64; 3],
        rays: Vec<f64>,
    },
    Act {
        vl: f64,
        vr: f64,
    },
    Query {
        op: String,
        args: Value,
    },
    Result {
        value: Value,
    },
    Stop,
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        code: Option<String>,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Init { .. } => "init",
            Message::Ready => "ready",
            Message::Sense { .. } => "sense",
            Message::Act { .. } => "act",
            Message::Query { .. } => "query",
            Message::Result { .. } => "result",
            Message::Stop => "stop",
            Message::Error { .. } => "error",
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }

    /// Parses one line; the error names the byte offset where parsing failed.
    pub fn decode(line: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(line).map_err(|e| {
            let offset = byte_offset(line, e.line(), e.column());
            HarnessError::protocol(e.to_string(), line, offset)
        })
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Host-side queries against a controller's own map and planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Query {
    IsOccupied { x: i32, y: i32 },
    NearestFree { x: i32, y: i32, max_rad: u32 },
    PlanPath { from: Pixel, to: Pixel },
}

impl Query {
    pub fn op(&self) -> &'static str {
        match self {
            Query::IsOccupied { .. } => "is_occupied",
            Query::NearestFree { .. } => "nearest_free",
            Query::PlanPath { .. } => "plan_path",
        }
    }

    fn to_message(self) -> Message {
        let args = match self {
            Query::IsOccupied { x, y } => json!({ "x": x, "y": y }),
            Query::NearestFree { x, y, max_rad } => json!({ "x": x, "y": y, "max_rad": max_rad }),
            Query::PlanPath { from, to } => json!({ "a": [from.x, from.y], "b": [to.x, to.y] }),
        };
        Message::Query {
            op: self.op().to_string(),
            args,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Init,
    Ready,
    Running,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "dir", content = "text", rename_all = "lowercase")]
pub enum TranscriptEntry {
    Sent(String),
    Received(String),
    /// Host-side events such as a forced kill.
    Note(String),
}

/// A controller the verifier can drive: wheel commands plus map queries.
pub trait Link: Controller {
    fn query(&mut self, q: Query) -> Result<Value, HarnessError>;

    fn is_occupied(&mut self, x: i32, y: i32) -> Result<bool, HarnessError> {
        let q = Query::IsOccupied { x, y };
        let v = self.query(q)?;
        v.as_bool()
            .ok_or_else(|| HarnessError::protocol(format!("is_occupied returned {v}, expected a boolean"), &v.to_string(), 0))
    }

    fn nearest_free(&mut self, x: i32, y: i32, max_rad: u32) -> Result<Pixel, HarnessError> {
        let v = self.query(Query::NearestFree { x, y, max_rad })?;
        parse_pixel(&v).ok_or_else(|| {
            HarnessError::protocol(format!("nearest_free returned {v}, expected [x, y] integers"), &v.to_string(), 0)
        })
    }

    /// `Ok(None)` when the controller reports that no path exists.
    fn plan_path(&mut self, from: Pixel, to: Pixel) -> Result<Option<Vec<Pixel>>, HarnessError> {
        let v = self.query(Query::PlanPath { from, to })?;
        if v.is_null() {
            return Ok(None);
        }
        let bad = || HarnessError::protocol(format!("plan_path returned {v}, expected a list of [x, y] integers or null"), &v.to_string(), 0);
        let items = v.as_array().ok_or_else(bad)?;
        items
            .iter()
            .map(|p| parse_pixel(p).ok_or_else(bad))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Ends the session; never fails.
    fn close(&mut self);
}

fn parse_pixel(v: &Value) -> Option<Pixel> {
    let arr = v.as_array()?;
    if arr.len() != 2 {
        return None;
    }
    let x = arr[0].as_i64()?;
    let y = arr[1].as_i64()?;
    Some(Pixel::new(i32::try_from(x).ok()?, i32::try_from(y).ok()?))
}

/// Opens fresh controller sessions. Each rollout or unit-check batch gets
/// its own session.
pub trait SessionFactory {
    type Link: Link;

    fn open(&mut self, seed: u64) -> Result<Self::Link, HarnessError>;
}

/// How to launch candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnConfig {
    /// Command template; `{source}` is replaced by the candidate file path.
    pub runner_cmd: String,
    /// File name the candidate source is written under.
    #[serde(default = "default_file_name")]
    pub file_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
}

fn default_file_name() -> String {
    "controller.py".to_string()
}

fn default_timeout_secs() -> f64 {
    DEFAULT_TIMEOUT.as_secs_f64()
}

impl Default for SpawnConfig {
    fn default() -> Self {
        Self {
            runner_cmd: "python3 {source}".to_string(),
            file_name: default_file_name(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

impl SpawnConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// Controller program text plus where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSource {
    pub source_text: String,
    pub origin: Origin,
    pub run: u32,
    pub iteration: u32,
    pub edit: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Generated,
    Edited,
}

impl CandidateSource {
    pub fn generated(source_text: impl Into<String>, run: u32, iteration: u32) -> Self {
        Self {
            source_text: source_text.into(),
            origin: Origin::Generated,
            run,
            iteration,
            edit: 0,
        }
    }

    pub fn edited(&self, source_text: impl Into<String>) -> Self {
        Self {
            source_text: source_text.into(),
            origin: Origin::Edited,
            run: self.run,
            iteration: self.iteration,
            edit: self.edit + 1,
        }
    }
}

pub struct Termination {
    pub exit_code: Option<i32>,
    pub forced: bool,
    pub transcript: Vec<TranscriptEntry>,
}

/// A running controller process.
pub struct ControllerSession {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    stderr: Arc<Mutex<String>>,
    state: SessionState,
    timeout: Duration,
    transcript: Vec<TranscriptEntry>,
    exit: Option<(Option<i32>, bool)>,
    _workdir: Option<tempfile::TempDir>,
}

impl std::fmt::Debug for ControllerSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControllerSession")
            .field("pid", &self.child.id())
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

/// Splits a command template on whitespace and substitutes `{source}`.
fn expand_template(template: &str, source: Option<&Path>) -> Result<Vec<String>, HarnessError> {
    let parts: Vec<String> = template
        .split_whitespace()
        .map(|tok| match source {
            Some(p) => tok.replace(SOURCE_PLACEHOLDER, &p.display().to_string()),
            None => tok.to_string(),
        })
        .collect();
    if parts.is_empty() {
        return Err(HarnessError::BadTemplate(template.to_string()));
    }
    Ok(parts)
}

/// Writes `candidate` to a private temp directory, launches it through
/// `spawn.runner_cmd`, and completes the init/ready handshake.
pub fn spawn(
    candidate: &CandidateSource,
    spawn: &SpawnConfig,
    params: &Value,
    grid_path: &Path,
) -> Result<ControllerSession, HarnessError> {
    if !spawn.runner_cmd.contains(SOURCE_PLACEHOLDER) {
        return Err(HarnessError::BadTemplate(spawn.runner_cmd.clone()));
    }
    let dir = tempfile::tempdir()?;
    let path = dir.path().join(&spawn.file_name);
    std::fs::write(&path, &candidate.source_text)?;
    let argv = expand_template(&spawn.runner_cmd, Some(&path))?;
    let mut session = ControllerSession::launch(&argv, spawn.timeout())?;
    session._workdir = Some(dir);
    session.handshake(params, grid_path)?;
    Ok(session)
}

impl ControllerSession {
    /// Starts a process without a handshake. `argv[0]` is the program.
    pub fn launch(argv: &[String], timeout: Duration) -> Result<Self, HarnessError> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| HarnessError::BadTemplate(String::new()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| HarnessError::Spawn {
                message: format!("{program}: {e}"),
                stderr: String::new(),
            })?;

        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let stderr = Arc::new(Mutex::new(String::new()));
        let sink = Arc::clone(&stderr);
        let mut child_err = child.stderr.take().expect("stderr is piped");
        thread::spawn(move || {
            let mut buf = [0u8; 4096];
            while let Ok(n) = std::io::Read::read(&mut child_err, &mut buf) {
                if n == 0 {
                    break;
                }
                let mut s = sink.lock().expect("stderr buffer");
                // keep the tail; a chatty child should not grow this without bound
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > 64 * 1024 {
                    let cut = s.len() - 32 * 1024;
                    let cut = (cut..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(cut);
                    s.drain(..cut);
                }
            }
        });

        Ok(Self {
            stdin: child.stdin.take(),
            child,
            lines,
            stderr,
            state: SessionState::Init,
            timeout,
            transcript: Vec::new(),
            exit: None,
            _workdir: None,
        })
    }

    /// Launches a full command line such as `python3 ctl.py` and handshakes.
    pub fn launch_command(
        command: &str,
        timeout: Duration,
        params: &Value,
        grid_path: &Path,
    ) -> Result<Self, HarnessError> {
        let argv = expand_template(command, None)?;
        let mut session = Self::launch(&argv, timeout)?;
        session.handshake(params, grid_path)?;
        Ok(session)
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn stderr(&self) -> String {
        self.stderr.lock().expect("stderr buffer").clone()
    }

    fn handshake(&mut self, params: &Value, grid_path: &Path) -> Result<(), HarnessError> {
        let init = Message::Init {
            params: params.clone(),
            grid_path: grid_path.display().to_string(),
        };
        let reply = self.send(&init).and_then(|()| self.receive());
        let result = match reply {
            Ok(Message::Ready) => {
                self.state = SessionState::Ready;
                return Ok(());
            }
            Ok(other) => Err(HarnessError::protocol(
                format!("expected ready, got {}", other.kind()),
                &other.encode(),
                0,
            )),
            Err(HarnessError::Timeout { waited }) => Err(HarnessError::HandshakeTimeout(waited)),
            Err(HarnessError::ChildExit { code, stderr }) => Err(HarnessError::Spawn {
                message: format!(
                    "controller exited before ready{}",
                    code.map(|c| format!(" (status {c})")).unwrap_or_default()
                ),
                stderr,
            }),
            Err(HarnessError::Io(e)) => Err(HarnessError::Spawn {
                message: format!("could not write init: {e}"),
                stderr: self.wait_for_stderr(),
            }),
            Err(e) => Err(e),
        };
        self.state = SessionState::Failed;
        self.kill();
        result
    }

    fn wait_for_stderr(&mut self) -> String {
        let deadline = Instant::now() + DEFAULT_GRACE;
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                break;
            }
            thread::sleep(Duration::from_millis(5));
        }
        // give the reader thread a moment to drain the pipe
        thread::sleep(Duration::from_millis(20));
        self.stderr()
    }

    fn send(&mut self, msg: &Message) -> Result<(), HarnessError> {
        let line = msg.encode();
        let stdin = self
            .stdin
            .as_mut()
            .ok_or(HarnessError::InvalidState(self.state))?;
        self.transcript.push(TranscriptEntry::Sent(line.clone()));
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        stdin.flush()?;
        Ok(())
    }

    fn receive(&mut self) -> Result<Message, HarnessError> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => {
                self.transcript.push(TranscriptEntry::Received(line.clone()));
                Message::decode(&line)
            }
            Ok(Err(e)) => Err(HarnessError::Io(e)),
            Err(RecvTimeoutError::Timeout) => Err(HarnessError::Timeout {
                waited: self.timeout,
            }),
            Err(RecvTimeoutError::Disconnected) => {
                let stderr = self.wait_for_stderr();
                let code = self.child.try_wait().ok().flatten().and_then(|s| s.code());
                Err(HarnessError::ChildExit { code, stderr })
            }
        }
    }

    /// One request line, one reply line. Any failure moves the session to
    /// the failed state.
    fn request(&mut self, msg: &Message) -> Result<Message, HarnessError> {
        if !matches!(self.state, SessionState::Ready | SessionState::Running) {
            return Err(HarnessError::InvalidState(self.state));
        }
        let reply = self.send(msg).and_then(|()| self.receive());
        let reply = match reply {
            Err(HarnessError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
                let stderr = self.wait_for_stderr();
                let code = self.child.try_wait().ok().flatten().and_then(|s| s.code());
                Err(HarnessError::ChildExit { code, stderr })
            }
            other => other,
        };
        if reply.is_err() {
            self.state = SessionState::Failed;
        }
        reply
    }

    /// Sends one observation and returns the controller's wheel command.
    pub fn exchange(&mut self, obs: &Observation) -> Result<WheelCommand, HarnessError> {
        let msg = Message::Sense {
            t: obs.t,
            pose: obs.pose,
            rays: obs.rays.clone(),
        };
        let reply = self.request(&msg)?;
        let result = match reply {
            Message::Act { vl, vr } if vl.is_finite() && vr.is_finite() => {
                self.state = SessionState::Running;
                return Ok(WheelCommand::new(vl, vr));
            }
            Message::Act { vl, vr } => Err(HarnessError::protocol(
                format!("non-finite wheel speeds vl={vl} vr={vr}"),
                &self.last_received(),
                0,
            )),
            Message::Error { message, .. } => Err(HarnessError::Remote(message)),
            other => Err(HarnessError::protocol(
                format!("expected act, got {}", other.kind()),
                &self.last_received(),
                0,
            )),
        };
        self.state = SessionState::Failed;
        result
    }

    fn last_received(&self) -> String {
        self.transcript
            .iter()
            .rev()
            .find_map(|e| match e {
                TranscriptEntry::Received(s) => Some(s.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }

    /// Map query; only valid before the first `sense`.
    pub fn query_value(&mut self, q: Query) -> Result<Value, HarnessError> {
        if self.state != SessionState::Ready {
            return Err(HarnessError::InvalidState(self.state));
        }
        let reply = self.request(&q.to_message())?;
        let result = match reply {
            Message::Result { value } => return Ok(value),
            Message::Error { code, .. } if code.as_deref() == Some("unsupported") => {
                Err(HarnessError::QueryUnsupported(q.op().to_string()))
            }
            Message::Error { message, .. } => Err(HarnessError::Remote(message)),
            other => Err(HarnessError::protocol(
                format!("expected result, got {}", other.kind()),
                &self.last_received(),
                0,
            )),
        };
        self.state = SessionState::Failed;
        result
    }

    fn kill(&mut self) {
        if self.exit.is_none() {
            let _ = self.child.kill();
            let status = self.child.wait().ok();
            self.exit = Some((status.and_then(|s| s.code()), true));
        }
    }

    /// Sends `stop`, waits a short grace period, then kills. Calling it again
    /// returns the same transcript without further effect.
    pub fn terminate(&mut self) -> Termination {
        if self.exit.is_none() {
            if self.stdin.is_some() && self.state != SessionState::Failed {
                let _ = self.send(&Message::Stop);
            }
            self.stdin = None;
            let deadline = Instant::now() + DEFAULT_GRACE;
            let mut status = None;
            while Instant::now() < deadline {
                match self.child.try_wait() {
                    Ok(Some(s)) => {
                        status = Some(s);
                        break;
                    }
                    Ok(None) => thread::sleep(Duration::from_millis(5)),
                    Err(_) => break,
                }
            }
            match status {
                Some(s) => self.exit = Some((s.code(), false)),
                None => {
                    self.transcript
                        .push(TranscriptEntry::Note("force-killed after grace period".to_string()));
                    self.kill();
                }
            }
            if self.state != SessionState::Failed {
                self.state = SessionState::Stopped;
            }
        }
        let (exit_code, forced) = self.exit.expect("exit recorded above");
        Termination {
            exit_code,
            forced,
            transcript: self.transcript.clone(),
        }
    }
}

impl Drop for ControllerSession {
    fn drop(&mut self) {
        self.stdin = None;
        if self.exit.is_none() {
            self.kill();
        }
    }
}

impl Controller for ControllerSession {
    fn act(&mut self, obs: &Observation) -> Result<WheelCommand, HarnessError> {
        self.exchange(obs)
    }
}

impl Link for ControllerSession {
    fn query(&mut self, q: Query) -> Result<Value, HarnessError> {
        self.query_value(q)
    }

    fn close(&mut self) {
        self.terminate();
    }
}

/// Spawns a fresh process for every session of one candidate.
pub struct ProcessFactory<'a> {
    pub candidate: &'a CandidateSource,
    pub spawn: &'a SpawnConfig,
    pub params: &'a Value,
    pub grid_path: PathBuf,
}

impl SessionFactory for ProcessFactory<'_> {
    type Link = ControllerSession;

    fn open(&mut self, seed: u64) -> Result<ControllerSession, HarnessError> {
        let mut params = self.params.clone();
        if let Value::Object(map) = &mut params {
            map.insert("seed".to_string(), json!(seed));
        }
        spawn(self.candidate, self.spawn, &params, &self.grid_path)
    }
}

/// Checks strict request/response alternation: every `Sent` message except
/// `stop` is followed by exactly one `Received` line before the next send.
pub fn transcript_alternates(transcript: &[TranscriptEntry]) -> bool {
    let mut outstanding = false;
    for entry in transcript {
        match entry {
            TranscriptEntry::Sent(line) => {
                if outstanding {
                    return false;
                }
                outstanding = !line.contains("\"type\":\"stop\"");
            }
            TranscriptEntry::Received(_) => {
                if !outstanding {
                    return false;
                }
                outstanding = false;
            }
            TranscriptEntry::Note(_) => {}
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_names_are_stable() {
        let cases = [
            (Message::Ready, r#"{"type":"ready"}"#),
            (Message::Stop, r#"{"type":"stop"}"#),
            (Message::Act { vl: 1.0, vr: 0.5 }, r#"{"type":"act","vl":1.0,"vr":0.5}"#),
            (
                Message::Sense {
                    t: 3,
                    pose: [1.0, 2.0, 0.5],
                    rays: vec![4.0],
                },
                r#"{"type":"sense","t":3,"pose":[1.0,2.0,0.5],"rays":[4.0]}"#,
            ),
            (
                Message::Result { value: json!(true) },
                r#"{"type":"result","value":true}"#,
            ),
            (
                Message::Error {
                    message: "no".into(),
                    code: Some("unsupported".into()),
                },
                r#"{"type":"error","message":"no","code":"unsupported"}"#,
            ),
        ];
        for (msg, text) in cases {
            assert_eq!(msg.encode(), text);
            assert_eq!(Message::decode(text).unwrap(), msg);
        }
        let init = Message::Init {
            params: json!({"n_rays": 8}),
            grid_path: "occ.png".into(),
        };
        assert_eq!(
            init.encode(),
            r#"{"type":"init","params":{"n_rays":8},"grid_path":"occ.png"}"#
        );
        assert_eq!(
            Query::PlanPath {
                from: Pixel::new(1, 2),
                to: Pixel::new(3, 4)
            }
            .to_message()
            .encode(),
            r#"{"type":"query","op":"plan_path","args":{"a":[1,2],"b":[3,4]}}"#
        );
    }

    #[test]
    fn decode_reports_offsets() {
        match Message::decode(r#"{"type":"act","vl":1.0,"vr":1.0} x"#) {
            Err(HarnessError::Protocol { offset, .. }) => assert_eq!(offset, 33),
            other => panic!("{other:?}"),
        }
        match Message::decode("hello") {
            Err(HarnessError::Protocol { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        assert!(Message::decode(r#"{"type":"warp"}"#).is_err());
    }

    #[test]
    fn template_expansion() {
        let argv = expand_template("python3 -u {source}", Some(Path::new("/tmp/c.py"))).unwrap();
        assert_eq!(argv, vec!["python3", "-u", "/tmp/c.py"]);
        assert!(expand_template("   ", None).is_err());
    }

    #[test]
    fn alternation_checker() {
        use TranscriptEntry::*;
        let ok = vec![
            Sent("{}".into()),
            Received("{}".into()),
            Sent(r#"{"type":"stop"}"#.into()),
            Note("x".into()),
        ];
        assert!(transcript_alternates(&ok));
        let bad = vec![Sent("{}".into()), Sent("{}".into())];
        assert!(!transcript_alternates(&bad));
        assert!(!transcript_alternates(&[Received("{}".into())]));
    }
}
