//! Experiment orchestration: preprocessing, multi-run synthesis, record
//! persistence, SR / CS metrics and trajectory images.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    synthesize, AgentError, Backend, BackendError, ChatBackend, ChatConfig, EnvContext, IterationRecord, LoopConfig,
    MockBackend, PromptTemplate,
};
use crate::harness::SpawnConfig;
use crate::mapopt::{select_best, MapOptError, ParamsFile, Selection, TaskSpec};
use crate::occgrid::{to_grayscale, ColorImage, GridError, OccupancyGrid, Pixel};
use crate::sim2d::{EpisodeLog, RobotConfig};
use crate::verify::{Environment, Suite, VerifyError};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment config {path}: {message}")]
    Config { path: String, message: String },
    #[error("inconsistent records: {0}")]
    InconsistentRecords(String),
    #[error(transparent)]
    MapOpt(#[from] MapOptError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] crate::agent::TemplateError),
    #[error("record line {line} of {path}: {message}")]
    RecordFormat { path: String, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Output of map preprocessing.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub selection: Selection,
    pub params: ParamsFile,
    pub grid_path: PathBuf,
    pub params_path: PathBuf,
}

/// Map image to `occ.png` and `params.json` in `out_dir`.
pub fn preprocess(
    map: impl AsRef<Path>,
    task: &TaskSpec,
    robot: &RobotConfig,
    out_dir: impl AsRef<Path>,
) -> Result<Preprocessed, RunnerError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let img = to_grayscale(&ColorImage::load_png(map)?);
    let selection = select_best(&img, task)?;
    let params = ParamsFile::new(&selection, task, robot);
    let grid_path = out_dir.join("occ.png");
    let params_path = out_dir.join("params.json");
    selection.grid.save_png(&grid_path)?;
    params.save(&params_path)?;
    Ok(Preprocessed {
        selection,
        params,
        grid_path,
        params_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub runs: u32,
    pub max_iterations: u32,
    /// First passing iteration per run; `None` when the run never passed.
    pub tau: Vec<Option<u32>>,
    pub sr: f64,
    /// `cs[k - 1]` is CS(k).
    pub cs: Vec<f64>,
    pub valid_pairs: usize,
    pub passing_pairs: usize,
}

impl RunMetrics {
    pub fn cs_at(&self, k: u32) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let i = (k.min(self.max_iterations) as usize).saturating_sub(1);
        self.cs.get(i).copied().unwrap_or(0.0)
    }
}

/// SR, CS(k) and stopping times. A pair (r, k) counts once a candidate was
/// generated; its outcome is the last test within that iteration.
pub fn compute_metrics(records: &[IterationRecord], runs: u32, max_iterations: u32) -> Result<RunMetrics, RunnerError> {
    use crate::agent::Action;
    let bad = |m: String| Err(RunnerError::InconsistentRecords(m));
    if runs == 0 || max_iterations == 0 {
        return bad(format!("need R >= 1 and K >= 1, got R={runs}, K={max_iterations}"));
    }
    let mut generated = BTreeSet::new();
    // (r, k) -> (seq, edit, failing) of the latest test
    let mut last_test: BTreeMap<(u32, u32), (u64, u32, usize)> = BTreeMap::new();
    let mut seen_seq = BTreeSet::new();
    let mut tests_seen: BTreeMap<(u32, u32, u32), usize> = BTreeMap::new();
    for r in records {
        if !(1..=runs).contains(&r.run) || !(1..=max_iterations).contains(&r.iteration) {
            return bad(format!(
                "record (r={}, k={}) outside R={runs}, K={max_iterations}",
                r.run, r.iteration
            ));
        }
        if !seen_seq.insert((r.run, r.seq)) {
            return bad(format!("duplicate seq {} in run {}", r.seq, r.run));
        }
        match r.action {
            Action::Generate => {
                generated.insert((r.run, r.iteration));
            }
            Action::Test => {
                let Some(f) = r.failing else {
                    return bad(format!("test record r={} seq={} has no failing count", r.run, r.seq));
                };
                if r.success != (f == 0) {
                    return bad(format!(
                        "test record r={} seq={} has success={} but f={f}",
                        r.run, r.seq, r.success
                    ));
                }
                if let Some(prev) = tests_seen.insert((r.run, r.iteration, r.edit), f) {
                    if (prev == 0) != (f == 0) {
                        return bad(format!(
                            "conflicting outcomes for (r={}, k={}, j={})",
                            r.run, r.iteration, r.edit
                        ));
                    }
                }
                let e = last_test.entry((r.run, r.iteration)).or_insert((r.seq, r.edit, f));
                if r.seq >= e.0 {
                    *e = (r.seq, r.edit, f);
                }
            }
            _ => {}
        }
    }
    if let Some((r, k)) = last_test.keys().find(|key| !generated.contains(key)) {
        return bad(format!("test without a generated candidate at (r={r}, k={k})"));
    }
    let outcome = |r: u32, k: u32| last_test.get(&(r, k)).map(|t| t.2);
    let valid_pairs = generated.len();
    let passing_pairs = generated.iter().filter(|&&(r, k)| outcome(r, k) == Some(0)).count();
    let tau: Vec<Option<u32>> = (1..=runs)
        .map(|r| (1..=max_iterations).find(|&k| generated.contains(&(r, k)) && outcome(r, k) == Some(0)))
        .collect();
    let cs = (1..=max_iterations)
        .map(|k| tau.iter().filter(|t| t.is_some_and(|t| t <= k)).count() as f64 / f64::from(runs))
        .collect();
    let sr = if valid_pairs == 0 {
        0.0
    } else {
        passing_pairs as f64 / valid_pairs as f64
    };
    Ok(RunMetrics {
        runs,
        max_iterations,
        tau,
        sr,
        cs,
        valid_pairs,
        passing_pairs,
    })
}

/// `metric,index,value` rows: SR, CS(k) for every k, then tau per run.
pub fn metrics_table(m: &RunMetrics) -> String {
    let mut out = String::from("metric,index,value\n");
    let _ = writeln!(out, "sr,,{}", m.sr);
    let _ = writeln!(out, "valid_pairs,,{}", m.valid_pairs);
    let _ = writeln!(out, "passing_pairs,,{}", m.passing_pairs);
    for (k, v) in m.cs.iter().enumerate() {
        let _ = writeln!(out, "cs,{},{}", k + 1, v);
    }
    for (r, t) in m.tau.iter().enumerate() {
        let v = t.map_or("inf".to_string(), |t| t.to_string());
        let _ = writeln!(out, "tau,{},{}", r + 1, v);
    }
    out
}

pub fn record_file(dir: &Path, run: u32) -> PathBuf {
    dir.join(format!("run-{run:03}.jsonl"))
}

/// Append-only JSON-lines writer for one run.
pub struct RecordWriter {
    file: File,
    path: PathBuf,
}

impl RecordWriter {
    /// Starts a fresh file for `run`, replacing any previous one.
    pub fn create(dir: &Path, run: u32) -> Result<Self, RunnerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = record_file(dir, run);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self { file, path })
    }

    pub fn append(&mut self, rec: &IterationRecord) -> Result<(), RunnerError> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

/// Every record from `run-*.jsonl` files in `dir`, in file-name order.
pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<IterationRecord>, RunnerError> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run-") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let f = File::open(&path).map_err(io_err(&path))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| RunnerError::RecordFormat {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.push(rec);
        }
    }
    Ok(out)
}

/// R and K of an experiment, stored next to its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub runs: u32,
    pub max_iterations: u32,
}

pub const META_FILE: &str = "meta.json";

impl RecordMeta {
    pub fn load(dir: &Path) -> Result<Option<Self>, RunnerError> {
        let path = dir.join(META_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map(Some).map_err(|e| RunnerError::RecordFormat {
            path: path.display().to_string(),
            line: 1,
            message: e.to_string(),
        })
    }

    /// Largest run and iteration seen.
    pub fn infer(records: &[IterationRecord]) -> Self {
        Self {
            runs: records.iter().map(|r| r.run).max().unwrap_or(0),
            max_iterations: records.iter().map(|r| r.iteration).max().unwrap_or(0),
        }
    }
}

const FREE_RGB: [u8; 3] = [255, 255, 255];
const OBSTACLE_RGB: [u8; 3] = [0, 0, 0];
const PATH_RGB: [u8; 3] = [30, 90, 230];
const START_RGB: [u8; 3] = [20, 170, 40];
const GOAL_RGB: [u8; 3] = [220, 30, 30];

/// Grid with the trajectory polyline and start/goal markers, as RGB PNG.
pub fn export_trajectory(grid: &OccupancyGrid, log: &EpisodeLog, out: impl AsRef<Path>) -> Result<(), RunnerError> {
    let img = trajectory_image(grid, log);
    img.save_png(out.as_ref())?;
    Ok(())
}

pub fn trajectory_image(grid: &OccupancyGrid, log: &EpisodeLog) -> ColorImage {
    let (w, h) = (grid.width(), grid.height());
    let mut px: Vec<[u8; 3]> = grid
        .cells()
        .iter()
        .map(|&c| if c { OBSTACLE_RGB } else { FREE_RGB })
        .collect();
    let mut put = |p: Pixel, rgb: [u8; 3]| {
        if grid.in_bounds(p) {
            px[p.y as usize * w + p.x as usize] = rgb;
        }
    };
    let cell = |x: f64, y: f64| Pixel::new((x + 0.5).floor() as i32, (y + 0.5).floor() as i32);
    let mut prev = Pixel::new(log.start.x, log.start.y);
    for r in &log.records {
        let next = cell(r.x, r.y);
        for p in line_cells(prev, next) {
            put(p, PATH_RGB);
        }
        prev = next;
    }
    for (center, rgb) in [(log.start, START_RGB), (log.goal, GOAL_RGB)] {
        for dy in -2..=2 {
            for dx in -2..=2 {
                put(Pixel::new(center.x + dx, center.y + dy), rgb);
            }
        }
    }
    ColorImage::new(w, h, px).expect("dimensions match the grid")
}

/// Bresenham cells from `a` to `b`, both included.
fn line_cells(a: Pixel, b: Pixel) -> Vec<Pixel> {
    let (dx, dy) = ((b.x - a.x).abs(), -(b.y - a.y).abs());
    let (sx, sy) = (if a.x < b.x { 1 } else { -1 }, if a.y < b.y { 1 } else { -1 });
    let mut err = dx + dy;
    let mut p = a;
    let mut out = vec![p];
    while p != b {
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            p.x += sx;
        }
        if e2 <= dx {
            err += dx;
            p.y += sy;
        }
        out.push(p);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    /// Replays a fixture; every run gets a fresh copy.
    Mock { fixture: PathBuf },
    Chat(ChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub map: PathBuf,
    pub start: Pixel,
    pub goal: Pixel,
    pub out_dir: PathBuf,
    #[serde(default = "one")]
    pub runs: u32,
    #[serde(default = "one")]
    pub parallelism: u32,
    pub max_iterations: u32,
    pub patience: u32,
    #[serde(default)]
    pub wall_clock: bool,
    pub backend: BackendConfig,
    #[serde(default)]
    pub spawn: SpawnConfig,
    /// Suite TOML; the bundled suite when absent.
    #[serde(default)]
    pub suite: Option<PathBuf>,
    /// Prompt template; the bundled one when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub robot: RobotConfigOverrides,
    #[serde(default)]
    pub task: TaskOverrides,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfigOverrides {
    pub axle_length: Option<f64>,
    pub sensor_range: Option<f64>,
    pub n_rays: Option<u32>,
    pub v_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskOverrides {
    pub goal_tol: Option<f64>,
    pub max_steps: Option<u32>,
}

impl ExperimentConfig {
    /// Reads TOML; relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| RunnerError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.map);
        fix(&mut self.out_dir);
        if let Some(p) = &mut self.suite {
            fix(p);
        }
        if let Some(p) = &mut self.template {
            fix(p);
        }
        if let BackendConfig::Mock { fixture } = &mut self.backend {
            fix(fixture);
        }
    }

    pub fn task(&self) -> TaskSpec {
        let mut t = TaskSpec::new(self.start, self.goal);
        if let Some(v) = self.task.goal_tol {
            t.goal_tol = v;
        }
        if let Some(v) = self.task.max_steps {
            t.max_steps = v;
            t.progress_window = t.progress_window.min(v);
        }
        t
    }

    pub fn robot(&self) -> RobotConfig {
        let d = RobotConfig::default();
        let o = &self.robot;
        RobotConfig {
            axle_length: o.axle_length.unwrap_or(d.axle_length),
            sensor_range: o.sensor_range.unwrap_or(d.sensor_range),
            n_rays: o.n_rays.unwrap_or(d.n_rays),
            v_max: o.v_max.unwrap_or(d.v_max),
            ..d
        }
    }

    fn make_backend(&self) -> Result<Box<dyn Backend + Send>, RunnerError> {
        Ok(match &self.backend {
            BackendConfig::Mock { fixture } => Box::new(MockBackend::load(fixture)?),
            BackendConfig::Chat(c) => Box::new(ChatBackend::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: u32,
    /// First passing iteration.
    pub passed_at: Option<u32>,
    pub controller: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub preprocessed: Preprocessed,
    pub runs: Vec<RunOutcome>,
    pub metrics: RunMetrics,
    pub records_dir: PathBuf,
}

/// Preprocesses the map once, then runs R independent synthesis runs.
/// Per-run records go to `out_dir/records/run-XXX.jsonl`; passing
/// controllers to `out_dir/controllers/run-XXX.py`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, RunnerError> {
    if cfg.runs == 0 || cfg.max_iterations == 0 {
        return Err(RunnerError::Config {
            path: cfg.out_dir.display().to_string(),
            message: "runs and max_iterations must be at least 1".to_string(),
        });
    }
    let task = cfg.task();
    task.validate()?;
    let robot = cfg.robot();
    let pre = preprocess(&cfg.map, &task, &robot, &cfg.out_dir)?;
    let suite = match &cfg.suite {
        Some(p) => Suite::load(p)?,
        None => Suite::default_suite(),
    };
    let template = match &cfg.template {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            PromptTemplate::parse(&text)?
        }
        None => PromptTemplate::default_template(),
    };
    let env = Environment::load(&pre.params_path, &pre.grid_path, suite, cfg.spawn.clone())?;
    let ctx = EnvContext::new(&env.grid, &env.params, &env.task, &env.robot);
    let records_dir = cfg.out_dir.join("records");
    let controllers_dir = cfg.out_dir.join("controllers");
    fs::create_dir_all(&controllers_dir).map_err(io_err(&controllers_dir))?;
    fs::create_dir_all(&records_dir).map_err(io_err(&records_dir))?;
    let meta = RecordMeta {
        runs: cfg.runs,
        max_iterations: cfg.max_iterations,
    };
    let meta_path = records_dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n")
        .map_err(io_err(&meta_path))?;

    let one_run = |run: u32| -> Result<(RunOutcome, Vec<IterationRecord>), RunnerError> {
        let mut backend = cfg.make_backend()?;
        let mut writer = RecordWriter::create(&records_dir, run)?;
        let mut write_err = None;
        let loop_cfg = LoopConfig {
            max_iterations: cfg.max_iterations,
            patience: cfg.patience,
            run,
            wall_clock: cfg.wall_clock,
        };
        let mut env = env.clone();
        let result = synthesize(&loop_cfg, template.clone(), &ctx, backend.as_mut(), &mut env, &mut |rec| {
            if let Err(e) = writer.append(rec) {
                write_err.get_or_insert(e);
            }
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        Ok(match result {
            Ok(s) => {
                let path = controllers_dir.join(format!("run-{run:03}.py"));
                fs::write(&path, &s.candidate.source_text).map_err(io_err(&path))?;
                (
                    RunOutcome {
                        run,
                        passed_at: Some(s.iteration),
                        controller: Some(path),
                        error: None,
                    },
                    s.records,
                )
            }
            Err(e) => {
                let records = e.records().to_vec();
                let error = match &e {
                    AgentError::BudgetExhausted { .. } => None,
                    other => Some(other.to_string()),
                };
                (
                    RunOutcome {
                        run,
                        passed_at: None,
                        controller: None,
                        error,
                    },
                    records,
                )
            }
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1) as usize)
        .build()
        .map_err(|e| RunnerError::Config {
            path: cfg.out_dir.display().to_string(),
            message: e.to_string(),
        })?;
    let results: Vec<Result<(RunOutcome, Vec<IterationRecord>), RunnerError>> =
        pool.install(|| (1..=cfg.runs).into_par_iter().map(one_run).collect());
    let mut runs = Vec::new();
    let mut records = Vec::new();
    for r in results {
        let (outcome, recs) = r?;
        runs.push(outcome);
        records.extend(recs);
    }
    let metrics = compute_metrics(&records, cfg.runs, cfg.max_iterations)?;
    Ok(ExperimentOutcome {
        preprocessed: pre,
        runs,
        metrics,
        records_dir,
    })
}
