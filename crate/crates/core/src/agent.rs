//! Prompt templates, text-generation backends and the generate / test /
//! edit / rules-update loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::harness::CandidateSource;
use crate::mapopt::TaskSpec;
use crate::occgrid::OccupancyGrid;
use crate::sim2d::RobotConfig;
use crate::verify::{summarize, DiagnosticReport, Verifier};

pub const RULES_BEGIN: &str = "AUTO_REPAIR_RULES_BEGIN";
pub const RULES_END: &str = "AUTO_REPAIR_RULES_END";
pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template has no {0} marker line")]
    MarkersMissing(&'static str),
    #[error("template marker {0} appears more than once")]
    DuplicateMarker(&'static str),
    #[error("{RULES_END} comes before {RULES_BEGIN}")]
    MarkersOutOfOrder,
    #[error("no value for placeholder ${0}")]
    UnresolvedPlaceholder(String),
}

/// Prompt text split around the auto-repair rules region. The marker lines
/// belong to the fixed text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    head: String,
    rules: String,
    tail: String,
}

fn marker_line(text: &str, marker: &'static str) -> Result<(usize, usize), TemplateError> {
    let mut found = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.contains(marker) {
            if found.is_some() {
                return Err(TemplateError::DuplicateMarker(marker));
            }
            found = Some((offset, offset + line.len()));
        }
        offset += line.len();
    }
    found.ok_or(TemplateError::MarkersMissing(marker))
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let (_, begin_end) = marker_line(text, RULES_BEGIN)?;
        let (end_start, _) = marker_line(text, RULES_END)?;
        if end_start < begin_end {
            return Err(TemplateError::MarkersOutOfOrder);
        }
        Ok(Self {
            head: text[..begin_end].to_string(),
            rules: text[begin_end..end_start].to_string(),
            tail: text[end_start..].to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::parse(&text)?)
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is well formed")
    }

    pub fn rules(&self) -> &str {
        &self.rules
    }

    /// Everything outside the rules region.
    pub fn fixed_text(&self) -> String {
        format!("{}{}", self.head, self.tail)
    }

    pub fn text(&self) -> String {
        format!("{}{}{}", self.head, self.rules, self.tail)
    }

    /// Replaces the rules region; the fixed text is untouched.
    pub fn with_rules(&self, new_rules: &str) -> Self {
        let mut rules = new_rules.to_string();
        if !rules.is_empty() && !rules.ends_with('\n') {
            rules.push('\n');
        }
        Self {
            head: self.head.clone(),
            rules,
            tail: self.tail.clone(),
        }
    }

    /// Substitutes `$name` slots in the fixed text; the rules region is
    /// inlined verbatim. `$$` is a literal dollar sign.
    pub fn render(&self, ctx: &EnvContext) -> Result<String, TemplateError> {
        let vars = ctx.vars();
        Ok(format!(
            "{}{}{}",
            substitute(&self.head, &vars)?,
            self.rules,
            substitute(&self.tail, &vars)?
        ))
    }
}

/// Rules update on raw template text.
pub fn apply_rules_update(template_text: &str, new_rules: &str) -> Result<String, TemplateError> {
    Ok(PromptTemplate::parse(template_text)?.with_rules(new_rules).text())
}

fn substitute(text: &str, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find('$') {
        out.push_str(&rest[..i]);
        let after = &rest[i + 1..];
        if let Some(stripped) = after.strip_prefix('$') {
            out.push('$');
            rest = stripped;
            continue;
        }
        let len = after
            .char_indices()
            .find(|&(j, c)| !(c == '_' || c.is_ascii_alphanumeric()) || (j == 0 && c.is_ascii_digit()))
            .map_or(after.len(), |(j, _)| j);
        if len == 0 {
            out.push('$');
            rest = after;
            continue;
        }
        let name = &after[..len];
        let value = vars
            .get(name)
            .ok_or_else(|| TemplateError::UnresolvedPlaceholder(name.to_string()))?;
        out.push_str(value);
        rest = &after[len..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Facts about the environment that prompts may reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvContext {
    pub width: usize,
    pub height: usize,
    pub obstacle_ratio: f64,
    pub params_json: String,
    pub task: TaskSpec,
    pub robot: RobotConfig,
    /// Extra named texts, e.g. a sensor module description.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl EnvContext {
    pub fn new(grid: &OccupancyGrid, params: &Value, task: &TaskSpec, robot: &RobotConfig) -> Self {
        Self {
            width: grid.width(),
            height: grid.height(),
            obstacle_ratio: grid.obstacle_ratio(),
            params_json: serde_json::to_string_pretty(params).expect("json value serializes"),
            task: *task,
            robot: *robot,
            extra: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> BTreeMap<String, String> {
        let mut v = BTreeMap::new();
        let mut put = |k: &str, val: String| {
            v.insert(k.to_string(), val);
        };
        put("width", self.width.to_string());
        put("height", self.height.to_string());
        put("obstacle_ratio", format!("{:.4}", self.obstacle_ratio));
        put("params_json", self.params_json.clone());
        put("start_x", self.task.start.x.to_string());
        put("start_y", self.task.start.y.to_string());
        put("goal_x", self.task.goal.x.to_string());
        put("goal_y", self.task.goal.y.to_string());
        put("goal_tol", self.task.goal_tol.to_string());
        put("max_steps", self.task.max_steps.to_string());
        put("progress_window", self.task.progress_window.to_string());
        put("progress_ratio", self.task.progress_ratio.to_string());
        put("axle_length", self.robot.axle_length.to_string());
        put("sensor_range", self.robot.sensor_range.to_string());
        put("n_rays", self.robot.n_rays.to_string());
        put("v_max", self.robot.v_max.to_string());
        for (k, val) in &self.extra {
            v.insert(k.clone(), val.clone());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Generate,
    Edit,
    UpdateRules,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Generate => "generate",
            CallKind::Edit => "edit",
            CallKind::UpdateRules => "update_rules",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempts: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub meta: CallMeta,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("mock transcript diverged at call {index}: expected {expected}, got {got}")]
    Divergence {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected reply shape: {0}")]
    BadReply(String),
    #[error("credential variable {0} is not set")]
    MissingCredential(String),
    #[error("mock fixture {path}: {message}")]
    Fixture { path: String, message: String },
}

/// The learner (generate, edit) and optimizer (update_rules) roles.
pub trait Backend {
    fn generate(&mut self, prompt: &str) -> Result<Reply, BackendError>;
    fn edit(&mut self, source: &str, failure_summary: &str) -> Result<Reply, BackendError>;
    fn update_rules(&mut self, rules: &str, failure_summary: &str) -> Result<Reply, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub call: CallKind,
    #[serde(default)]
    pub response: Option<String>,
    /// Response read from a file next to the fixture.
    #[serde(default)]
    pub response_file: Option<PathBuf>,
}

/// Replays a fixed list of (call, response) pairs and rejects any call out
/// of order.
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: Vec<(CallKind, String)>,
    next: usize,
    calls: Vec<(CallKind, String)>,
}

impl MockBackend {
    pub fn new(script: Vec<(CallKind, String)>) -> Self {
        Self {
            script,
            next: 0,
            calls: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let fixture_err = |message: String| BackendError::Fixture {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| fixture_err(e.to_string()))?;
        let entries: Vec<MockEntry> = serde_json::from_str(&text).map_err(|e| fixture_err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut script = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let response = match (e.response, e.response_file) {
                (Some(r), None) => r,
                (None, Some(f)) => {
                    let p = base.join(&f);
                    fs::read_to_string(&p).map_err(|err| fixture_err(format!("entry {i}: {}: {err}", p.display())))?
                }
                _ => return Err(fixture_err(format!("entry {i} needs exactly one of response, response_file"))),
            };
            script.push((e.call, response));
        }
        Ok(Self::new(script))
    }

    /// Inputs received so far: the prompt, the failure summary, or the
    /// current rules, depending on the call.
    pub fn calls(&self) -> &[(CallKind, String)] {
        &self.calls
    }

    pub fn remaining(&self) -> usize {
        self.script.len() - self.next
    }

    fn take(&mut self, kind: CallKind, input: &str) -> Result<Reply, BackendError> {
        let index = self.next;
        let Some((expected, response)) = self.script.get(index) else {
            return Err(BackendError::Divergence {
                index,
                expected: "end of transcript".to_string(),
                got: kind.as_str().to_string(),
            });
        };
        if *expected != kind {
            return Err(BackendError::Divergence {
                index,
                expected: expected.as_str().to_string(),
                got: kind.as_str().to_string(),
            });
        }
        self.next += 1;
        self.calls.push((kind, input.to_string()));
        Ok(Reply {
            text: response.clone(),
            meta: CallMeta::default(),
        })
    }
}

impl Backend for MockBackend {
    fn generate(&mut self, prompt: &str) -> Result<Reply, BackendError> {
        self.take(CallKind::Generate, prompt)
    }

    fn edit(&mut self, _source: &str, failure_summary: &str) -> Result<Reply, BackendError> {
        self.take(CallKind::Edit, failure_summary)
    }

    fn update_rules(&mut self, rules: &str, _failure_summary: &str) -> Result<Reply, BackendError> {
        self.take(CallKind::UpdateRules, rules)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatConfig {
    /// Chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_call_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_temperature() -> f64 {
    0.2
}
fn default_call_timeout() -> f64 {
    120.0
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    1000
}

const SYSTEM_CODER: &str = "You write complete Python robot controller programs. Reply with the program only, in one fenced code block.";
const SYSTEM_RULES: &str = "You maintain a list of repair rules for a code generator. Reply with the complete updated rule list only, one rule per line.";

/// Chat-completions client with bounded retries.
pub struct ChatBackend {
    cfg: ChatConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatBackend").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl ChatBackend {
    pub fn new(cfg: ChatConfig) -> Result<Self, BackendError> {
        let api_key =
            std::env::var(&cfg.api_key_env).map_err(|_| BackendError::MissingCredential(cfg.api_key_env.clone()))?;
        Ok(Self::with_key(cfg, api_key))
    }

    pub fn with_key(cfg: ChatConfig, api_key: String) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .build()
            .into();
        Self { cfg, api_key, agent }
    }

    fn chat(&mut self, system: &str, user: &str) -> Result<Reply, BackendError> {
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let started = Instant::now();
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let sent = self
                .agent
                .post(&self.cfg.endpoint)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(&body);
            let value: Value = match sent.and_then(|mut r| r.body_mut().read_json()) {
                Ok(v) => v,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let text = value
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| BackendError::BadReply(truncate(&value.to_string(), 300)))?;
            return Ok(Reply {
                text: text.to_string(),
                meta: CallMeta {
                    model: Some(self.cfg.model.clone()),
                    total_tokens: value.pointer("/usage/total_tokens").and_then(Value::as_u64),
                    latency_ms: Some(started.elapsed().as_millis() as u64),
                    attempts: Some(attempt),
                },
            });
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}

fn truncate(s: &str, n: usize) -> String {
    match s.char_indices().nth(n) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

impl Backend for ChatBackend {
    fn generate(&mut self, prompt: &str) -> Result<Reply, BackendError> {
        let mut r = self.chat(SYSTEM_CODER, prompt)?;
        r.text = extract_code(&r.text);
        Ok(r)
    }

    fn edit(&mut self, source: &str, failure_summary: &str) -> Result<Reply, BackendError> {
        let user = format!(
            "The controller below fails these checks:\n{failure_summary}\n\nFix it and return the full corrected program.\n\n```python\n{source}\n```\n"
        );
        let mut r = self.chat(SYSTEM_CODER, &user)?;
        r.text = extract_code(&r.text);
        Ok(r)
    }

    fn update_rules(&mut self, rules: &str, failure_summary: &str) -> Result<Reply, BackendError> {
        let user = format!(
            "Current repair rules:\n{rules}\n\nThe latest controller still failed after editing:\n{failure_summary}\n\nReturn the updated rules so the next generated controller avoids these failures."
        );
        let mut r = self.chat(SYSTEM_RULES, &user)?;
        r.text = extract_code(&r.text).trim().to_string();
        Ok(r)
    }
}

/// Body of the first fenced code block, or the whole reply when there is
/// none.
pub fn extract_code(reply: &str) -> String {
    let Some(open) = reply.find("```") else {
        return reply.to_string();
    };
    let after = &reply[open + 3..];
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => body[..close].to_string(),
        None => reply.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Generate,
    Test,
    Edit,
    UpdateRules,
}

/// One event of a synthesis run. `failing` and `success` are set on test
/// events only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub run: u32,
    pub iteration: u32,
    pub edit: u32,
    pub action: Action,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing: Option<usize>,
    #[serde(default)]
    pub success: bool,
    /// Wall-clock milliseconds since the Unix epoch, when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unix_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "is_default_meta")]
    pub meta: CallMeta,
}

fn is_default_meta(m: &CallMeta) -> bool {
    *m == CallMeta::default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Iteration budget K.
    pub max_iterations: u32,
    /// Edit patience J.
    pub patience: u32,
    /// Run index r stamped on records.
    #[serde(default = "one")]
    pub run: u32,
    #[serde(default)]
    pub wall_clock: bool,
}

fn one() -> u32 {
    1
}

impl LoopConfig {
    pub fn new(max_iterations: u32, patience: u32) -> Self {
        Self {
            max_iterations,
            patience,
            run: 1,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no candidate passed within {iterations} iterations")]
    BudgetExhausted {
        iterations: u32,
        records: Vec<IterationRecord>,
        template: PromptTemplate,
    },
    #[error("backend failed: {source}")]
    Backend {
        #[source]
        source: BackendError,
        records: Vec<IterationRecord>,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AgentError {
    pub fn records(&self) -> &[IterationRecord] {
        match self {
            AgentError::BudgetExhausted { records, .. } | AgentError::Backend { records, .. } => records,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub candidate: CandidateSource,
    pub report: DiagnosticReport,
    pub records: Vec<IterationRecord>,
    pub template: PromptTemplate,
    /// Iteration at which the candidate passed.
    pub iteration: u32,
}

struct Recorder<'a> {
    run: u32,
    wall_clock: bool,
    records: Vec<IterationRecord>,
    sink: &'a mut dyn FnMut(&IterationRecord),
}

impl Recorder<'_> {
    fn push(&mut self, k: u32, j: u32, action: Action, report: Option<&DiagnosticReport>, meta: CallMeta) {
        let unix_ms = self.wall_clock.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64)
        });
        let rec = IterationRecord {
            run: self.run,
            iteration: k,
            edit: j,
            action,
            seq: self.records.len() as u64,
            failing: report.map(|r| r.failing_count),
            success: report.is_some_and(|r| r.passed),
            unix_ms,
            summary: report.map(summarize),
            meta,
        };
        (self.sink)(&rec);
        self.records.push(rec);
    }
}

/// The repair loop. For each iteration k: generate, then up to J edits,
/// testing after each; when patience runs out the rules region is rewritten
/// from the last failure summary and the prompt re-rendered. The rules
/// update also happens after the final iteration.
pub fn synthesize<B, V>(
    cfg: &LoopConfig,
    template: PromptTemplate,
    ctx: &EnvContext,
    backend: &mut B,
    verifier: &mut V,
    sink: &mut dyn FnMut(&IterationRecord),
) -> Result<Synthesis, AgentError>
where
    B: Backend + ?Sized,
    V: Verifier + ?Sized,
{
    if cfg.max_iterations == 0 {
        return Err(AgentError::Config("max_iterations must be at least 1".to_string()));
    }
    let mut template = template;
    let mut prompt = template.render(ctx)?;
    let mut rec = Recorder {
        run: cfg.run,
        wall_clock: cfg.wall_clock,
        records: Vec::new(),
        sink,
    };
    macro_rules! call {
        ($e:expr) => {
            match $e {
                Ok(r) => r,
                Err(source) => {
                    return Err(AgentError::Backend {
                        source,
                        records: rec.records,
                    })
                }
            }
        };
    }

    for k in 1..=cfg.max_iterations {
        let reply = call!(backend.generate(&prompt));
        rec.push(k, 0, Action::Generate, None, reply.meta);
        let mut candidate = CandidateSource::generated(reply.text, cfg.run, k);
        for j in 0..=cfg.patience {
            let report = verifier.verify(&candidate);
            rec.push(k, j, Action::Test, Some(&report), CallMeta::default());
            if report.passed {
                return Ok(Synthesis {
                    candidate,
                    report,
                    records: rec.records,
                    template,
                    iteration: k,
                });
            }
            let summary = summarize(&report);
            if j < cfg.patience {
                let reply = call!(backend.edit(&candidate.source_text, &summary));
                rec.push(k, j + 1, Action::Edit, None, reply.meta);
                candidate = candidate.edited(reply.text);
            } else {
                let reply = call!(backend.update_rules(template.rules(), &summary));
                rec.push(k, j, Action::UpdateRules, None, reply.meta);
                template = template.with_rules(&reply.text);
                prompt = template.render(ctx)?;
            }
        }
    }
    Err(AgentError::BudgetExhausted {
        iterations: cfg.max_iterations,
        records: rec.records,
        template,
    })
}

/// Whether an action sequence is a prefix of
/// `(generate test (edit test){0..J} update_rules)*`, with exactly J edits
/// before each rules update, ending at the first passing test.
pub fn trace_is_well_formed(records: &[IterationRecord], patience: u32) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum S {
        NeedGenerate,
        NeedTest(u32),
        AfterTest(u32),
        Done,
    }
    let mut s = S::NeedGenerate;
    for r in records {
        s = match (s, r.action) {
            (S::NeedGenerate, Action::Generate) => S::NeedTest(0),
            (S::NeedTest(_), Action::Test) if r.success => S::Done,
            (S::NeedTest(j), Action::Test) => S::AfterTest(j),
            (S::AfterTest(j), Action::Edit) if j < patience => S::NeedTest(j + 1),
            (S::AfterTest(j), Action::UpdateRules) if j == patience => S::NeedGenerate,
            _ => return false,
        };
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::CheckResult;
    use crate::Pixel;

    fn ctx() -> EnvContext {
        EnvContext {
            width: 40,
            height: 30,
            obstacle_ratio: 0.25,
            params_json: "{}".into(),
            task: TaskSpec::new(Pixel::new(1, 2), Pixel::new(30, 20)),
            robot: RobotConfig::default(),
            extra: BTreeMap::new(),
        }
    }

    const T: &str = "Map $width x $height, goal ($goal_x, $goal_y). Cost $$5.\n# AUTO_REPAIR_RULES_BEGIN\n# AUTO_REPAIR_RULES_END\nEnd.\n";

    #[test]
    fn render_with_empty_rules() {
        let t = PromptTemplate::parse(T).unwrap();
        assert_eq!(t.rules(), "");
        assert_eq!(
            t.render(&ctx()).unwrap(),
            "Map 40 x 30, goal (30, 20). Cost $5.\n# AUTO_REPAIR_RULES_BEGIN\n# AUTO_REPAIR_RULES_END\nEnd.\n"
        );
    }

    #[test]
    fn rules_are_inlined_verbatim() {
        let t = PromptTemplate::parse(T).unwrap().with_rules("- keep $width off\n- turn left");
        let out = t.render(&ctx()).unwrap();
        assert!(out.contains("# AUTO_REPAIR_RULES_BEGIN\n- keep $width off\n- turn left\n# AUTO_REPAIR_RULES_END\n"));
    }

    #[test]
    fn missing_slot_is_named() {
        let t = PromptTemplate::parse("$nope\nAUTO_REPAIR_RULES_BEGIN\nAUTO_REPAIR_RULES_END\n").unwrap();
        assert_eq!(t.render(&ctx()), Err(TemplateError::UnresolvedPlaceholder("nope".into())));
    }

    #[test]
    fn marker_errors() {
        assert_eq!(
            PromptTemplate::parse("AUTO_REPAIR_RULES_BEGIN\n"),
            Err(TemplateError::MarkersMissing(RULES_END))
        );
        assert_eq!(
            PromptTemplate::parse("AUTO_REPAIR_RULES_END\nAUTO_REPAIR_RULES_BEGIN\n"),
            Err(TemplateError::MarkersOutOfOrder)
        );
        assert_eq!(
            PromptTemplate::parse("AUTO_REPAIR_RULES_BEGIN\nAUTO_REPAIR_RULES_BEGIN\nAUTO_REPAIR_RULES_END\n"),
            Err(TemplateError::DuplicateMarker(RULES_BEGIN))
        );
        assert!(apply_rules_update("no markers", "x").is_err());
    }

    #[test]
    fn update_is_idempotent_and_keeps_fixed_text() {
        let once = apply_rules_update(T, "- a\n- b\n").unwrap();
        let twice = apply_rules_update(&once, "- a\n- b\n").unwrap();
        assert_eq!(once, twice);
        let t = PromptTemplate::parse(&once).unwrap();
        assert_eq!(t.rules(), "- a\n- b\n");
        assert_eq!(t.fixed_text(), PromptTemplate::parse(T).unwrap().fixed_text());
    }

    #[test]
    fn bundled_template_renders() {
        let t = PromptTemplate::default_template();
        let out = t.render(&ctx()).unwrap();
        assert!(!out.contains("$width"));
    }

    #[test]
    fn code_extraction() {
        assert_eq!(extract_code("Here:\n```python\nprint(1)\n```\nbye"), "print(1)\n");
        assert_eq!(extract_code("```\na\n```\n```\nb\n```"), "a\n");
        assert_eq!(extract_code("just text"), "just text");
        assert_eq!(extract_code("```python\nunterminated"), "```python\nunterminated");
    }

    /// Passes exactly the sources listed.
    struct ByText(Vec<String>, u32);

    impl Verifier for ByText {
        fn verify(&mut self, c: &CandidateSource) -> DiagnosticReport {
            self.1 += 1;
            if self.0.contains(&c.source_text) {
                DiagnosticReport::new(vec![CheckResult {
                    id: "x".into(),
                    status: crate::verify::Status::Pass,
                    message: String::new(),
                    measurements: None,
                }])
            } else {
                DiagnosticReport::new(vec![CheckResult {
                    id: "x".into(),
                    status: crate::verify::Status::Fail,
                    message: format!("bad {}", c.source_text),
                    measurements: None,
                }])
            }
        }
    }

    fn script(items: &[(CallKind, &str)]) -> MockBackend {
        MockBackend::new(items.iter().map(|(k, s)| (*k, s.to_string())).collect())
    }

    #[test]
    fn scripted_trace() {
        use CallKind::*;
        let mut backend = script(&[(Generate, "a"), (Edit, "b"), (UpdateRules, "- r1"), (Generate, "good")]);
        let mut v = ByText(vec!["good".to_string()], 0);
        let out = synthesize(
            &LoopConfig::new(20, 1),
            PromptTemplate::parse(T).unwrap(),
            &ctx(),
            &mut backend,
            &mut v,
            &mut |_| {},
        )
        .unwrap();
        let actions: Vec<Action> = out.records.iter().map(|r| r.action).collect();
        use Action as A;
        assert_eq!(actions, [A::Generate, A::Test, A::Edit, A::Test, A::UpdateRules, A::Generate, A::Test]);
        assert_eq!(out.iteration, 2);
        assert_eq!(out.template.rules(), "- r1\n");
        assert!(trace_is_well_formed(&out.records, 1));
        // the second prompt carries the new rule, the edit saw the summary
        assert!(backend.calls()[3].1.contains("- r1"));
        assert_eq!(backend.calls()[1].1, "1. bad a [x: fail]");
    }

    #[test]
    fn divergence_reports_index() {
        let mut backend = script(&[(CallKind::Generate, "a"), (CallKind::Generate, "b")]);
        let mut v = ByText(vec![], 0);
        let err = synthesize(
            &LoopConfig::new(3, 1),
            PromptTemplate::parse(T).unwrap(),
            &ctx(),
            &mut backend,
            &mut v,
            &mut |_| {},
        )
        .unwrap_err();
        match err {
            AgentError::Backend {
                source: BackendError::Divergence { index, .. },
                records,
            } => {
                assert_eq!(index, 1);
                assert_eq!(records.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn automaton_rejects_bad_shapes() {
        let mk = |a: Action, success: bool| IterationRecord {
            run: 1,
            iteration: 1,
            edit: 0,
            action: a,
            seq: 0,
            failing: None,
            success,
            unix_ms: None,
            summary: None,
            meta: CallMeta::default(),
        };
        use Action::*;
        let ok = [mk(Generate, false), mk(Test, false), mk(UpdateRules, false), mk(Generate, false)];
        assert!(trace_is_well_formed(&ok, 0));
        assert!(!trace_is_well_formed(&ok, 1));
        let early_update = [mk(Generate, false), mk(Test, false), mk(UpdateRules, false)];
        assert!(!trace_is_well_formed(&early_update, 2));
        let after_pass = [mk(Generate, false), mk(Test, true), mk(Edit, false)];
        assert!(!trace_is_well_formed(&after_pass, 1));
    }

    /// Serves canned HTTP responses, one per connection, and returns the
    /// request bodies it saw.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut req = vec![0; len];
                reader.read_exact(&mut req).unwrap();
                bodies.push(String::from_utf8(req).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn chat_cfg(endpoint: String) -> ChatConfig {
        ChatConfig {
            endpoint,
            model: "m1".into(),
            api_key_env: "UNUSED".into(),
            temperature: 0.3,
            timeout_secs: 10.0,
            max_attempts: 3,
            backoff_ms: 1,
        }
    }

    #[test]
    fn chat_retries_then_extracts_code() {
        let ok = json!({
            "choices": [{"message": {"content": "Sure:\n```python\nprint('hi')\n```"}}],
            "usage": {"total_tokens": 42}
        })
        .to_string();
        let (url, server) = serve(vec![(500, "{}".into()), (503, "{}".into()), (200, ok)]);
        let mut b = ChatBackend::with_key(chat_cfg(url), "k".into());
        let reply = b.generate("write it").unwrap();
        assert_eq!(reply.text, "print('hi')\n");
        assert_eq!(reply.meta.attempts, Some(3));
        assert_eq!(reply.meta.total_tokens, Some(42));
        let bodies = server.join().unwrap();
        let sent: Value = serde_json::from_str(&bodies[2]).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["temperature"], 0.3);
        assert_eq!(sent["messages"][1]["content"], "write it");
    }

    #[test]
    fn chat_gives_up_after_three_attempts() {
        let (url, server) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        let mut b = ChatBackend::with_key(chat_cfg(url), "k".into());
        match b.generate("x") {
            Err(BackendError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn missing_credential() {
        let cfg = ChatConfig {
            api_key_env: "CTRLSYNTH_TEST_SURELY_UNSET_VAR".into(),
            ..chat_cfg("http://127.0.0.1:9".into())
        };
        assert!(matches!(ChatBackend::new(cfg), Err(BackendError::MissingCredential(_))));
    }

    proptest::proptest! {
        #[test]
        fn loop_counts_match_budget(k in 1u32..6, j in 0u32..4, pass_at in proptest::option::of(0usize..30)) {
            // one scripted reply per call; candidate n is "c{n}"
            let mut items = Vec::new();
            let mut n = 0;
            for _ in 0..k {
                items.push((CallKind::Generate, format!("c{n}")));
                n += 1;
                for _ in 0..j {
                    items.push((CallKind::Edit, format!("c{n}")));
                    n += 1;
                }
                items.push((CallKind::UpdateRules, "- rule".to_string()));
            }
            let mut v = ByText(pass_at.map(|p| format!("c{p}")).into_iter().collect(), 0);
            let mut backend = MockBackend::new(items);
            let res = synthesize(&LoopConfig::new(k, j), PromptTemplate::parse(T).unwrap(), &ctx(), &mut backend, &mut v, &mut |_| {});
            let records = match &res {
                Ok(s) => s.records.clone(),
                Err(e) => e.records().to_vec(),
            };
            proptest::prop_assert!(trace_is_well_formed(&records, j));
            let count = |a: Action| records.iter().filter(|r| r.action == a).count() as u32;
            proptest::prop_assert!(count(Action::Generate) <= k);
            proptest::prop_assert!(count(Action::Edit) <= k * j);
            proptest::prop_assert!(count(Action::UpdateRules) <= k);
            let total = (k * (j + 1)) as usize;
            match pass_at {
                Some(p) if p < total => {
                    proptest::prop_assert!(res.is_ok());
                    proptest::prop_assert_eq!(v.1 as usize, p + 1);
                }
                _ => {
                    proptest::prop_assert!(matches!(res, Err(AgentError::BudgetExhausted { .. })), "expected exhaustion");
                    proptest::prop_assert_eq!(v.1, k * (j + 1));
                    proptest::prop_assert_eq!(count(Action::UpdateRules), k);
                }
            }
        }
    }
}
