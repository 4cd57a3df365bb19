//! Candidate verification: static contract, unit API and end-to-end tiers.
//!
//! A suite is a TOML list of checks. Static checks look only at source
//! text; unit checks query a live controller session against the host grid;
//! end-to-end checks run fresh seeded episodes. A failing hygiene check
//! (a banned pattern marked `aborts`) turns every unit and end-to-end check
//! into an error without running it.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::harness::{CandidateSource, HarnessError, Link, ProcessFactory, SessionFactory, SpawnConfig};
use crate::mapopt::{ParamsFile, TaskSpec};
use crate::occgrid::{OccupancyGrid, Pixel, MOVES};
use crate::sim2d::{run_episode, EpisodeError, EpisodeLog, RobotConfig};

pub const DEFAULT_SUITE: &str = include_str!("../assets/default_suite.toml");
pub const ALL_PASSED: &str = "all checks passed";

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("suite config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("suite is empty")]
    EmptySuite,
    #[error("duplicate check id {0:?}")]
    DuplicateId(String),
    #[error("check {id:?}: {message}")]
    InvalidCheck { id: String, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Params(#[from] crate::mapopt::MapOptError),
    #[error(transparent)]
    Grid(#[from] crate::occgrid::GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    StaticContract,
    UnitApi,
    EndToEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckKind {
    /// Every token must occur in the source.
    RequiredTokens {
        tokens: Vec<String>,
        /// Noun used in the failure message, e.g. "constant".
        #[serde(default = "default_label")]
        label: String,
    },
    /// Fails when the regex matches anywhere in the source.
    BannedPattern {
        pattern: String,
        message: String,
        #[serde(default = "yes")]
        aborts: bool,
    },
    Occupancy {
        #[serde(default = "default_samples")]
        samples: usize,
    },
    NearestFree {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_max_rad")]
        max_rad: u32,
    },
    Planner {
        #[serde(default = "default_pairs")]
        pairs: usize,
    },
    Schema {
        #[serde(default = "default_schema_steps")]
        steps: u32,
    },
    /// Defaults to the task's progress window.
    Stability {
        steps: Option<u32>,
    },
    Progress {
        steps: Option<u32>,
        ratio: Option<f64>,
    },
    Success {
        steps: Option<u32>,
    },
}

fn default_label() -> String {
    "token".to_string()
}
fn yes() -> bool {
    true
}
fn default_samples() -> usize {
    12
}
fn default_max_rad() -> u32 {
    10
}
fn default_pairs() -> usize {
    4
}
fn default_schema_steps() -> u32 {
    25
}

impl CheckKind {
    pub fn category(&self) -> Category {
        match self {
            CheckKind::RequiredTokens { .. } | CheckKind::BannedPattern { .. } => Category::StaticContract,
            CheckKind::Occupancy { .. } | CheckKind::NearestFree { .. } | CheckKind::Planner { .. } => {
                Category::UnitApi
            }
            _ => Category::EndToEnd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub id: String,
    pub category: Category,
    #[serde(default)]
    pub description: String,
    #[serde(flatten)]
    pub kind: CheckKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    /// Seed for unit-check sampling and every rollout.
    #[serde(default)]
    pub seed: u64,
    pub checks: Vec<CheckSpec>,
}

impl Suite {
    pub fn from_toml(text: &str) -> Result<Self, VerifyError> {
        let suite: Suite = toml::from_str(text)?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VerifyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| VerifyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn default_suite() -> Self {
        Self::from_toml(DEFAULT_SUITE).expect("bundled suite is valid")
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.checks.is_empty() {
            return Err(VerifyError::EmptySuite);
        }
        let mut seen = HashSet::new();
        for c in &self.checks {
            if !seen.insert(c.id.as_str()) {
                return Err(VerifyError::DuplicateId(c.id.clone()));
            }
            let invalid = |message: String| VerifyError::InvalidCheck {
                id: c.id.clone(),
                message,
            };
            if c.kind.category() != c.category {
                return Err(invalid(format!(
                    "kind belongs to {:?}, declared {:?}",
                    c.kind.category(),
                    c.category
                )));
            }
            match &c.kind {
                CheckKind::BannedPattern { pattern, .. } => {
                    Regex::new(pattern).map_err(|e| invalid(e.to_string()))?;
                }
                CheckKind::RequiredTokens { tokens, .. } if tokens.is_empty() => {
                    return Err(invalid("no tokens".to_string()));
                }
                CheckKind::Progress { ratio: Some(r), .. } if !(*r > 0.0 && *r < 1.0) => {
                    return Err(invalid(format!("ratio must be in (0, 1), got {r}")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Adds a banned-pattern hygiene check in front of the suite.
    pub fn with_banned_pattern(&self, id: &str, pattern: &str, message: &str) -> Self {
        let mut out = self.clone();
        out.checks.insert(
            0,
            CheckSpec {
                id: id.to_string(),
                category: Category::StaticContract,
                description: String::new(),
                kind: CheckKind::BannedPattern {
                    pattern: pattern.to_string(),
                    message: message.to_string(),
                    aborts: true,
                },
            },
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Error => "error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub d0: f64,
    pub d_min: f64,
    pub collisions: u32,
    pub steps_used: u32,
    pub goal_reached: bool,
    pub final_distance: f64,
}

impl From<&EpisodeLog> for Measurements {
    fn from(log: &EpisodeLog) -> Self {
        Self {
            d0: log.d0,
            d_min: log.d_min,
            collisions: log.collisions,
            steps_used: log.steps_used,
            goal_reached: log.goal_reached,
            final_distance: log.final_distance(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: String,
    pub status: Status,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurements: Option<Measurements>,
}

impl CheckResult {
    fn pass(id: &str) -> Self {
        Self {
            id: id.to_string(),
            status: Status::Pass,
            message: String::new(),
            measurements: None,
        }
    }

    fn fail(id: &str, message: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            status: Status::Fail,
            message: message.into(),
            measurements: None,
        }
    }

    fn error(id: &str, message: impl Into<String>) -> Self {
        Self {
            id: id.to_string(),
            status: Status::Error,
            message: message.into(),
            measurements: None,
        }
    }

    fn measured(mut self, m: Option<Measurements>) -> Self {
        self.measurements = m;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub results: Vec<CheckResult>,
    pub failing_count: usize,
    pub passed: bool,
}

impl DiagnosticReport {
    pub fn new(results: Vec<CheckResult>) -> Self {
        let failing_count = results.iter().filter(|r| r.status != Status::Pass).count();
        Self {
            results,
            failing_count,
            passed: failing_count == 0,
        }
    }

    pub fn get(&self, id: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Shortest round-trip rendering after rounding to six decimals.
pub fn fmt_num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        "0".to_string()
    } else {
        format!("{r}")
    }
}

pub fn progress_message(d_min: f64, ratio: f64, d0: f64) -> String {
    format!(
        "No significant progress toward goal ({} (d_min) ≥ {} × {} (d0)).",
        fmt_num(d_min),
        fmt_num(ratio),
        fmt_num(d0)
    )
}

pub fn success_message(m: &Measurements, goal_tol: f64) -> String {
    if m.goal_reached {
        format!(
            "Reached goal but collided with obstacles (collisions={}, steps_used={}).",
            m.collisions, m.steps_used
        )
    } else {
        format!(
            "Did not reach goal (d_min={}, collisions={}, final distance {} ≥ {} after {} steps).",
            fmt_num(m.d_min),
            m.collisions,
            fmt_num(m.final_distance),
            fmt_num(goal_tol),
            m.steps_used
        )
    }
}

/// Numbered list of the non-pass results in report order.
pub fn summarize(report: &DiagnosticReport) -> String {
    let mut out = String::new();
    let failing = report.results.iter().filter(|r| r.status != Status::Pass);
    for (n, r) in failing.enumerate() {
        let _ = write!(out, "{}. {} [{}: {}", n + 1, r.message, r.id, r.status.as_str());
        if let Some(m) = &r.measurements {
            let _ = write!(
                out,
                "; d0={}, d_min={}, collisions={}, steps_used={}, goal_reached={}, final_distance={}",
                fmt_num(m.d0),
                fmt_num(m.d_min),
                m.collisions,
                m.steps_used,
                m.goal_reached,
                fmt_num(m.final_distance)
            );
        }
        out.push_str("]\n");
    }
    if out.is_empty() {
        ALL_PASSED.to_string()
    } else {
        out.pop();
        out
    }
}

/// Static checks, in suite order. Returns the results and the id of the
/// first aborting hygiene failure, if any.
pub fn run_static_checks(source: &str, checks: &[CheckSpec]) -> (Vec<CheckResult>, Option<String>) {
    let mut aborted_by = None;
    let mut results = Vec::new();
    for c in checks {
        match &c.kind {
            CheckKind::RequiredTokens { tokens, label } => {
                let missing: Vec<&str> = tokens
                    .iter()
                    .filter(|t| !source.contains(t.as_str()))
                    .map(String::as_str)
                    .collect();
                results.push(if missing.is_empty() {
                    CheckResult::pass(&c.id)
                } else {
                    let lines: Vec<String> = missing.iter().map(|t| format!("missing required {label} {t}")).collect();
                    CheckResult::fail(&c.id, lines.join("; "))
                });
            }
            CheckKind::BannedPattern {
                pattern,
                message,
                aborts,
            } => {
                let re = Regex::new(pattern).expect("patterns validated with the suite");
                if re.is_match(source) {
                    let msg = if *aborts {
                        aborted_by.get_or_insert_with(|| c.id.clone());
                        format!("{message} Test setup aborted.")
                    } else {
                        message.clone()
                    };
                    results.push(CheckResult::fail(&c.id, msg));
                } else {
                    results.push(CheckResult::pass(&c.id));
                }
            }
            _ => {}
        }
    }
    (results, aborted_by)
}

/// Everything a suite run needs besides the candidate.
#[derive(Debug, Clone)]
pub struct Environment {
    pub grid: OccupancyGrid,
    pub grid_path: PathBuf,
    /// `params.json` content forwarded to controllers at init.
    pub params: Value,
    pub task: TaskSpec,
    pub robot: RobotConfig,
    pub suite: Suite,
    pub spawn: SpawnConfig,
}

impl Environment {
    pub fn load(
        params_path: impl AsRef<Path>,
        grid_path: impl AsRef<Path>,
        suite: Suite,
        spawn: SpawnConfig,
    ) -> Result<Self, VerifyError> {
        let params = ParamsFile::load(params_path)?;
        let grid = OccupancyGrid::load_png(grid_path.as_ref())?;
        Ok(Self {
            grid,
            grid_path: grid_path.as_ref().to_path_buf(),
            params: serde_json::to_value(&params).expect("params serialize"),
            task: params.task(),
            robot: params.robot(),
            suite,
            spawn,
        })
    }
}

/// A finished suite run plus the episode logs of its rollouts, keyed by
/// check id.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub report: DiagnosticReport,
    pub logs: Vec<(String, EpisodeLog)>,
}

impl SuiteRun {
    pub fn log(&self, id: &str) -> Option<&EpisodeLog> {
        self.logs.iter().find(|(i, _)| i == id).map(|(_, l)| l)
    }
}

/// Runs the suite against a candidate by spawning it as a child process.
pub fn run_suite(candidate: &CandidateSource, env: &Environment) -> SuiteRun {
    let mut factory = ProcessFactory {
        candidate,
        spawn: &env.spawn,
        params: &env.params,
        grid_path: env.grid_path.clone(),
    };
    run_suite_with(&candidate.source_text, &mut factory, env)
}

/// Tiers run in order (static, unit, end-to-end); results come back in
/// suite order.
pub fn run_suite_with<F: SessionFactory>(source: &str, factory: &mut F, env: &Environment) -> SuiteRun {
    let checks = &env.suite.checks;
    let (static_results, aborted_by) = run_static_checks(source, checks);
    let mut slots: Vec<Option<CheckResult>> = vec![None; checks.len()];
    let mut static_iter = static_results.into_iter();
    for (slot, c) in slots.iter_mut().zip(checks) {
        if c.category == Category::StaticContract {
            *slot = static_iter.next();
        }
    }

    let mut logs = Vec::new();
    for tier in [Category::UnitApi, Category::EndToEnd] {
        for (i, c) in checks.iter().enumerate().filter(|(_, c)| c.category == tier) {
            let result = match &aborted_by {
                Some(by) => CheckResult::error(&c.id, format!("Test setup aborted ({by} failed).")),
                None => {
                    let (result, log) = run_dynamic_check(c, factory, env);
                    if let Some(log) = log {
                        logs.push((c.id.clone(), log));
                    }
                    result
                }
            };
            slots[i] = Some(result);
        }
    }
    let results = slots.into_iter().map(|r| r.expect("every check ran")).collect();
    SuiteRun {
        report: DiagnosticReport::new(results),
        logs,
    }
}

fn run_dynamic_check<F: SessionFactory>(
    c: &CheckSpec,
    factory: &mut F,
    env: &Environment,
) -> (CheckResult, Option<EpisodeLog>) {
    let seed = env.suite.seed;
    let mut link = match factory.open(seed) {
        Ok(link) => link,
        Err(e) => return (CheckResult::error(&c.id, format!("could not start controller: {e}")), None),
    };
    let out = match &c.kind {
        CheckKind::Occupancy { samples } => (unit_occupancy(&c.id, &mut link, &env.grid, *samples, seed), None),
        CheckKind::NearestFree { samples, max_rad } => (
            unit_nearest_free(&c.id, &mut link, &env.grid, *samples, *max_rad, seed),
            None,
        ),
        CheckKind::Planner { pairs } => (unit_planner(&c.id, &mut link, &env.grid, *pairs, seed), None),
        kind => e2e(&c.id, kind, &mut link, env),
    };
    link.close();
    out
}

fn session_error(id: &str, e: &HarnessError) -> CheckResult {
    CheckResult::error(id, format!("controller session failed: {e}"))
}

fn sample_cells(grid: &OccupancyGrid, occupied: bool, n: usize, rng: &mut ChaCha8Rng) -> Vec<Pixel> {
    let pool: Vec<Pixel> = grid.pixels().filter(|&p| grid.is_occupied(p) == occupied).collect();
    pool.choose_multiple(rng, n).copied().collect()
}

fn unit_occupancy<L: Link>(id: &str, link: &mut L, grid: &OccupancyGrid, samples: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (grid.width() as i32, grid.height() as i32);
    let mut cells = sample_cells(grid, true, samples, &mut rng);
    cells.extend(sample_cells(grid, false, samples, &mut rng));
    cells.extend([
        Pixel::new(-1, rng.random_range(0..h)),
        Pixel::new(w, rng.random_range(0..h)),
        Pixel::new(rng.random_range(0..w), -1),
        Pixel::new(rng.random_range(0..w), h),
        Pixel::new(-w, -h),
    ]);
    let mut wrong = Vec::new();
    for &p in &cells {
        let expected = grid.is_occupied(p);
        match link.is_occupied(p.x, p.y) {
            Ok(got) if got == expected => {}
            Ok(got) => wrong.push(format!("{p}: expected {expected}, got {got}")),
            Err(e) => return session_error(id, &e),
        }
    }
    if wrong.is_empty() {
        CheckResult::pass(id)
    } else {
        CheckResult::fail(
            id,
            format!(
                "is_occupied disagrees with the map on {} of {} cells: {}",
                wrong.len(),
                cells.len(),
                wrong.iter().take(5).cloned().collect::<Vec<_>>().join("; ")
            ),
        )
    }
}

fn unit_nearest_free<L: Link>(
    id: &str,
    link: &mut L,
    grid: &OccupancyGrid,
    samples: usize,
    max_rad: u32,
    seed: u64,
) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e66);
    // occupied cells that do have a free cell in range, plus a few free ones
    let mut pool: Vec<Pixel> = grid
        .pixels()
        .filter(|&p| grid.is_occupied(p) && grid.nearest_free(p, max_rad).is_ok())
        .collect();
    pool.shuffle(&mut rng);
    pool.truncate(samples);
    pool.extend(sample_cells(grid, false, samples.div_ceil(4), &mut rng));
    for p in pool {
        match link.nearest_free(p.x, p.y, max_rad) {
            Ok(q) if grid.is_occupied(q) => {
                return CheckResult::fail(id, format!("nearest_free{p} returned occupied cell {q}"));
            }
            Ok(q) if (q.x - p.x).unsigned_abs().max((q.y - p.y).unsigned_abs()) > max_rad => {
                return CheckResult::fail(id, format!("nearest_free{p} returned {q}, farther than max_rad={max_rad}"));
            }
            Ok(_) => {}
            Err(e) => return session_error(id, &e),
        }
    }
    CheckResult::pass(id)
}

/// Host-side re-check of a waypoint list.
pub fn path_problem(grid: &OccupancyGrid, from: Pixel, to: Pixel, path: &[Pixel]) -> Option<String> {
    let (first, last) = match (path.first(), path.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Some("empty path".to_string()),
    };
    if first != from || last != to {
        return Some(format!("path runs {first} -> {last}, expected {from} -> {to}"));
    }
    if let Some(p) = path.iter().find(|&&p| grid.is_occupied(p)) {
        return Some(format!("path point {p} is in an obstacle"));
    }
    for pair in path.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let d = (b.x - a.x, b.y - a.y);
        if !MOVES.contains(&d) {
            return Some(format!("step {a} -> {b} is not an 8-neighbor move"));
        }
        if d.0 != 0 && d.1 != 0
            && (grid.is_occupied(Pixel::new(a.x + d.0, a.y)) || grid.is_occupied(Pixel::new(a.x, a.y + d.1)))
        {
            return Some(format!("step {a} -> {b} cuts an obstacle corner"));
        }
    }
    None
}

fn unit_planner<L: Link>(id: &str, link: &mut L, grid: &OccupancyGrid, pairs: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706c);
    let labels = grid.free_components();
    let label = |p: Pixel| labels[p.y as usize * grid.width() + p.x as usize];
    let free: Vec<Pixel> = grid.pixels().filter(|&p| grid.is_free(p)).collect();
    if free.is_empty() {
        return CheckResult::error(id, "map has no free cells");
    }
    let mut connected = Vec::new();
    let mut split = None;
    for _ in 0..pairs * 50 {
        if connected.len() >= pairs && split.is_some() {
            break;
        }
        let a = *free.choose(&mut rng).expect("non-empty");
        let b = *free.choose(&mut rng).expect("non-empty");
        if label(a) == label(b) {
            if connected.len() < pairs {
                connected.push((a, b));
            }
        } else if split.is_none() {
            split = Some((a, b));
        }
    }
    for (a, b) in connected {
        match link.plan_path(a, b) {
            Ok(Some(path)) => {
                if let Some(problem) = path_problem(grid, a, b, &path) {
                    return CheckResult::fail(id, format!("plan_path({a}, {b}): {problem}"));
                }
            }
            Ok(None) => return CheckResult::fail(id, format!("plan_path({a}, {b}) found no path but one exists")),
            Err(e) => return session_error(id, &e),
        }
    }
    if let Some((a, b)) = split {
        match link.plan_path(a, b) {
            Ok(None) => {}
            Ok(Some(_)) => {
                return CheckResult::fail(id, format!("plan_path({a}, {b}) returned a path between disconnected regions"))
            }
            Err(e) => return session_error(id, &e),
        }
    }
    CheckResult::pass(id)
}

fn e2e<L: Link>(id: &str, kind: &CheckKind, link: &mut L, env: &Environment) -> (CheckResult, Option<EpisodeLog>) {
    let budget = match kind {
        CheckKind::Schema { steps } => *steps,
        CheckKind::Stability { steps } | CheckKind::Progress { steps, .. } => steps.unwrap_or(env.task.progress_window),
        CheckKind::Success { steps } => steps.unwrap_or(env.task.max_steps),
        _ => unreachable!("unit checks are handled separately"),
    };
    let task = TaskSpec {
        max_steps: budget,
        ..env.task
    };
    let mut log = match run_episode(&env.grid, &task, &env.robot, link, env.suite.seed) {
        Ok(log) => log,
        Err(EpisodeError::Session { step, source, partial }) => {
            let m = Measurements::from(partial.as_ref());
            let r = CheckResult::error(id, format!("controller session failed at step {step}: {source}"));
            return (r.measured(Some(m)), Some(*partial));
        }
        Err(e) => return (CheckResult::error(id, e.to_string()), None),
    };
    log.grid_path = Some(env.grid_path.display().to_string());
    let m = Some(Measurements::from(&log));
    let result = match kind {
        CheckKind::Schema { .. } => match schema_problem(&log) {
            None => CheckResult::pass(id),
            Some(p) => CheckResult::fail(id, p),
        },
        CheckKind::Stability { .. } => CheckResult::pass(id),
        CheckKind::Progress { ratio, .. } => {
            let ratio = ratio.unwrap_or(env.task.progress_ratio);
            if log.d_min <= ratio * log.d0 {
                CheckResult::pass(id)
            } else {
                CheckResult::fail(id, progress_message(log.d_min, ratio, log.d0))
            }
        }
        CheckKind::Success { .. } => {
            let m = Measurements::from(&log);
            if m.goal_reached && m.final_distance < env.task.goal_tol && m.collisions == 0 {
                CheckResult::pass(id)
            } else {
                CheckResult::fail(id, success_message(&m, env.task.goal_tol))
            }
        }
        _ => unreachable!(),
    };
    (result.measured(m), Some(log))
}

fn schema_problem(log: &EpisodeLog) -> Option<String> {
    let parsed = match EpisodeLog::from_text(&log.to_text()) {
        Ok(p) => p,
        Err(e) => return Some(format!("episode log does not parse: {e}")),
    };
    if parsed.records.len() != log.steps_used as usize {
        return Some(format!(
            "log has {} records for {} steps",
            parsed.records.len(),
            log.steps_used
        ));
    }
    for (i, r) in parsed.records.iter().enumerate() {
        if r.step as usize != i {
            return Some(format!("record {i} carries step {}", r.step));
        }
        if ![r.x, r.y, r.v_l, r.v_r].iter().all(|v| v.is_finite()) {
            return Some(format!("record {i} has a non-finite field"));
        }
    }
    None
}

/// Anything that can judge a candidate. The agent loop only sees this.
pub trait Verifier {
    fn verify(&mut self, candidate: &CandidateSource) -> DiagnosticReport;
}

impl Verifier for Environment {
    fn verify(&mut self, candidate: &CandidateSource) -> DiagnosticReport {
        run_suite(candidate, self).report
    }
}
