use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use ctrlsynth::harness::{CandidateSource, ControllerSession, SpawnConfig, DEFAULT_TIMEOUT};
use ctrlsynth::mapopt::{ParamsFile, TaskSpec};
use ctrlsynth::runner::{
    compute_metrics, export_trajectory, load_records, metrics_table, preprocess, run_experiment, ExperimentConfig,
    RecordMeta,
};
use ctrlsynth::sim2d::{run_episode, EpisodeError, EpisodeLog, RobotConfig};
use ctrlsynth::verify::{run_suite, summarize, Environment, Suite};
use ctrlsynth::{OccupancyGrid, Pixel};

#[derive(Parser)]
#[command(name = "ctrlsynth", version, about = "Map preprocessing and test-driven controller synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build occ.png and params.json from a map image.
    Preprocess {
        map: PathBuf,
        #[arg(long, value_parser = parse_pixel)]
        start: Pixel,
        #[arg(long, value_parser = parse_pixel)]
        goal: Pixel,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        goal_tol: Option<f64>,
        #[arg(long)]
        max_steps: Option<u32>,
    },
    /// Run one episode against a controller process.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Command line of the controller, e.g. "python3 ctl.py".
        #[arg(long)]
        controller_cmd: String,
        /// Episode log destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        timeout_secs: Option<f64>,
    },
    /// Run the verification suite on a candidate; exit code 0 iff it passes.
    Verify {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Suite TOML; the bundled suite when omitted.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        candidate: PathBuf,
        /// Launch template with a {source} slot.
        #[arg(long)]
        runner_cmd: Option<String>,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Run the synthesis loop described by an experiment TOML.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
    },
    /// SR / CS table from a records directory.
    Metrics {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        runs: Option<u32>,
        #[arg(long)]
        iterations: Option<u32>,
    },
    /// Draw an episode log over its grid.
    Render {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid PNG; taken from the log's grid= line when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

fn parse_pixel(s: &str) -> Result<Pixel, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got {s:?}"))?;
    let x = x.trim().parse().map_err(|e| format!("x in {s:?}: {e}"))?;
    let y = y.trim().parse().map_err(|e| format!("y in {s:?}: {e}"))?;
    Ok(Pixel::new(x, y))
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Preprocess {
            map,
            start,
            goal,
            out,
            goal_tol,
            max_steps,
        } => {
            let mut task = TaskSpec::new(start, goal);
            if let Some(t) = goal_tol {
                task.goal_tol = t;
            }
            if let Some(m) = max_steps {
                task.max_steps = m;
                task.progress_window = task.progress_window.min(m);
            }
            let pre = preprocess(&map, &task, &RobotConfig::default(), &out)?;
            let p = &pre.selection.params;
            println!(
                "threshold={} polarity={} inflate={} cleanup={} score={:.4}",
                p.threshold, p.polarity, p.inflate, p.cleanup, pre.selection.score.score
            );
            println!("{}", pre.grid_path.display());
            println!("{}", pre.params_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            params,
            grid,
            controller_cmd,
            out,
            seed,
            timeout_secs,
        } => simulate(&params, &grid, &controller_cmd, out.as_deref(), seed, timeout_secs),
        Command::Verify {
            params,
            grid,
            suite,
            candidate,
            runner_cmd,
            report,
        } => {
            let suite = match suite {
                Some(p) => Suite::load(p)?,
                None => Suite::default_suite(),
            };
            let mut spawn = SpawnConfig::default();
            if let Some(c) = runner_cmd {
                spawn.runner_cmd = c;
            }
            let env = Environment::load(&params, &grid, suite, spawn)?;
            let text = fs::read_to_string(&candidate).with_context(|| format!("reading {}", candidate.display()))?;
            let run = run_suite(&CandidateSource::generated(text, 1, 1), &env);
            fs::write(&report, run.report.to_json()).with_context(|| format!("writing {}", report.display()))?;
            println!("{}", summarize(&run.report));
            Ok(if run.report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Synthesize { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg)?;
            for r in &outcome.runs {
                match (&r.controller, &r.error) {
                    (Some(path), _) => println!(
                        "run {}: passed at iteration {} -> {}",
                        r.run,
                        r.passed_at.unwrap_or(0),
                        path.display()
                    ),
                    (None, Some(e)) => println!("run {}: error: {e}", r.run),
                    (None, None) => println!("run {}: budget exhausted", r.run),
                }
            }
            let table = metrics_table(&outcome.metrics);
            let path = cfg.out_dir.join("metrics.csv");
            fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            print!("{table}");
            Ok(if outcome.runs.iter().any(|r| r.controller.is_some()) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Metrics {
            records,
            runs,
            iterations,
        } => {
            let recs = load_records(&records)?;
            let meta = RecordMeta::load(&records)?.unwrap_or_else(|| RecordMeta::infer(&recs));
            let m = compute_metrics(
                &recs,
                runs.unwrap_or(meta.runs),
                iterations.unwrap_or(meta.max_iterations),
            )?;
            print!("{}", metrics_table(&m));
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { log, out, grid } => {
            let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let episode = EpisodeLog::from_text(&text)?;
            let grid_path = match grid {
                Some(g) => g,
                None => {
                    let g = episode
                        .grid_path
                        .as_ref()
                        .ok_or_else(|| anyhow!("log has no grid= line; pass --grid"))?;
                    let g = PathBuf::from(g);
                    if g.is_relative() {
                        log.parent().unwrap_or(Path::new(".")).join(g)
                    } else {
                        g
                    }
                }
            };
            let grid = OccupancyGrid::load_png(&grid_path)?;
            export_trajectory(&grid, &episode, &out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn simulate(
    params_path: &Path,
    grid_path: &Path,
    command: &str,
    out: Option<&Path>,
    seed: u64,
    timeout_secs: Option<f64>,
) -> Result<ExitCode> {
    let params = ParamsFile::load(params_path)?;
    let grid = OccupancyGrid::load_png(grid_path)?;
    let mut value = serde_json::to_value(&params)?;
    value["seed"] = seed.into();
    let timeout = match timeout_secs {
        Some(s) if s > 0.0 && s.is_finite() => Duration::from_secs_f64(s),
        Some(s) => bail!("timeout must be positive, got {s}"),
        None => DEFAULT_TIMEOUT,
    };
    let mut session = ControllerSession::launch_command(command, timeout, &value, grid_path)?;
    let result = run_episode(&grid, &params.task(), &params.robot(), &mut session, seed);
    session.terminate();
    let (mut log, failure) = match result {
        Ok(log) => (log, None),
        Err(EpisodeError::Session { step, source, partial }) => (*partial, Some(format!("step {step}: {source}"))),
        Err(e) => return Err(e.into()),
    };
    log.grid_path = Some(grid_path.display().to_string());
    let text = log.to_text();
    match out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    eprintln!(
        "steps={} collisions={} d0={:.2} d_min={:.2} final={:.2} goal_reached={}",
        log.steps_used,
        log.collisions,
        log.d0,
        log.d_min,
        log.final_distance(),
        log.goal_reached
    );
    if let Some(f) = failure {
        eprintln!("controller failed at {f}");
        let stderr = session.stderr();
        if !stderr.trim().is_empty() {
            eprintln!("{}", stderr.trim_end());
        }
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}
