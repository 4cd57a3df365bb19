//! Differential-drive simulation on occupancy grids.
//!
//! Speeds are in pixels per step and one step is the integration interval.
//! Translation uses the heading from before the step. A move that would put
//! the body disk on an obstacle cell (or past the map edge) is reverted and
//! counted as a collision; the heading change still applies.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::HarnessError;
use crate::mapopt::TaskSpec;
use crate::occgrid::{GridError, OccupancyGrid, Pixel};

/// Search radius used to snap task endpoints onto free cells.
pub const SNAP_RADIUS: u32 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotConfig {
    pub axle_length: f64,
    pub sensor_range: f64,
    pub n_rays: u32,
    /// Per-wheel speed limit, px per step.
    pub v_max: f64,
    /// Initial heading in radians; normalized into `[0, 2pi)` on use.
    pub theta0: f64,
    pub body_radius: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            axle_length: 8.0,
            sensor_range: 60.0,
            n_rays: 16,
            v_max: 2.0,
            theta0: 40.0,
            body_radius: 1.5,
        }
    }
}

impl RobotConfig {
    /// Wheel limit of 0.02 px per step. Far too slow to cover image-scale
    /// maps inside a 2500-step horizon; kept for comparison runs.
    pub fn slow_wheels() -> Self {
        Self {
            v_max: 0.02,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        let ok = self.axle_length > 0.0
            && self.sensor_range > 0.0
            && self.n_rays >= 1
            && self.v_max > 0.0
            && self.body_radius >= 0.0
            && self.theta0.is_finite();
        if ok {
            Ok(())
        } else {
            Err(EpisodeError::InvalidConfig(format!("{self:?}")))
        }
    }
}

pub fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if t >= TAU {
        0.0
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn distance_to(&self, p: Pixel) -> f64 {
        (self.x - f64::from(p.x)).hypot(self.y - f64::from(p.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WheelCommand {
    pub v_l: f64,
    pub v_r: f64,
}

impl WheelCommand {
    pub fn new(v_l: f64, v_r: f64) -> Self {
        Self { v_l, v_r }
    }

    pub fn clamped(self, v_max: f64) -> Self {
        Self {
            v_l: self.v_l.clamp(-v_max, v_max),
            v_r: self.v_r.clamp(-v_max, v_max),
        }
    }
}

/// Grid cell containing a world point.
fn cell_of(x: f64, y: f64) -> Pixel {
    Pixel::new((x + 0.5).floor() as i32, (y + 0.5).floor() as i32)
}

/// Whether a disk of `radius` centered at `(x, y)` touches an obstacle cell
/// or extends past the map edge.
pub fn body_overlaps(grid: &OccupancyGrid, x: f64, y: f64, radius: f64) -> bool {
    let (w, h) = (grid.width() as f64, grid.height() as f64);
    if !(x.is_finite() && y.is_finite()) {
        return true;
    }
    if x - radius < -0.5 || y - radius < -0.5 || x + radius >= w - 0.5 || y + radius >= h - 0.5 {
        return true;
    }
    if grid.is_occupied(cell_of(x, y)) {
        return true;
    }
    if radius <= 0.0 {
        return false;
    }
    let lo = cell_of(x - radius, y - radius);
    let hi = cell_of(x + radius, y + radius);
    let r2 = radius * radius;
    for cy in lo.y..=hi.y {
        for cx in lo.x..=hi.x {
            let c = Pixel::new(cx, cy);
            if !grid.is_occupied(c) {
                continue;
            }
            let dx = (x - f64::from(cx)).abs() - 0.5;
            let dy = (y - f64::from(cy)).abs() - 0.5;
            let d2 = dx.max(0.0).powi(2) + dy.max(0.0).powi(2);
            if d2 < r2 {
                return true;
            }
        }
    }
    false
}

/// One integration step. Returns the new state and whether the move was
/// blocked.
pub fn step(
    state: RobotState,
    cmd: WheelCommand,
    cfg: &RobotConfig,
    grid: &OccupancyGrid,
) -> (RobotState, bool) {
    let cmd = cmd.clamped(cfg.v_max);
    let v = 0.5 * (cmd.v_l + cmd.v_r);
    let omega = (cmd.v_r - cmd.v_l) / cfg.axle_length;
    let theta = normalize_angle(state.theta + omega);
    if v == 0.0 {
        return (RobotState { theta, ..state }, false);
    }
    let x = state.x + v * state.theta.cos();
    let y = state.y + v * state.theta.sin();
    if body_overlaps(grid, x, y, cfg.body_radius) {
        (
            RobotState {
                x: state.x,
                y: state.y,
                theta,
            },
            true,
        )
    } else {
        (RobotState { x, y, theta }, false)
    }
}

/// Range readings for `n_rays` rays spread evenly around the full circle,
/// ray 0 along the heading.
///
/// Each ray walks the grid cell by cell and stops at the first boundary of an
/// obstacle (or off-map) cell. A ray starting inside an obstacle reads 0.
pub fn raycast(state: &RobotState, cfg: &RobotConfig, grid: &OccupancyGrid) -> Vec<f64> {
    (0..cfg.n_rays)
        .map(|k| {
            let angle = state.theta + TAU * f64::from(k) / f64::from(cfg.n_rays);
            cast_ray(grid, state.x, state.y, angle, cfg.sensor_range)
        })
        .collect()
}

pub fn cast_ray(grid: &OccupancyGrid, x: f64, y: f64, angle: f64, max_range: f64) -> f64 {
    let mut cell = cell_of(x, y);
    if grid.is_occupied(cell) {
        return 0.0;
    }
    let (dx, dy) = (angle.cos(), angle.sin());
    // shift so cell boundaries sit on integers
    let (u, v) = (x + 0.5, y + 0.5);
    let step_x: i32 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i32 = if dy > 0.0 { 1 } else { -1 };
    let delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
    let delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
    let mut next_x = if dx > 0.0 {
        (u.floor() + 1.0 - u) * delta_x
    } else if dx < 0.0 {
        (u - u.floor()) * delta_x
    } else {
        f64::INFINITY
    };
    let mut next_y = if dy > 0.0 {
        (v.floor() + 1.0 - v) * delta_y
    } else if dy < 0.0 {
        (v - v.floor()) * delta_y
    } else {
        f64::INFINITY
    };
    loop {
        let t = if next_x < next_y {
            cell.x += step_x;
            let t = next_x;
            next_x += delta_x;
            t
        } else {
            cell.y += step_y;
            let t = next_y;
            next_y += delta_y;
            t
        };
        if t >= max_range {
            return max_range;
        }
        if grid.is_occupied(cell) {
            return t;
        }
    }
}

/// What the controller sees before each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: u32,
    pub pose: [f64; 3],
    pub rays: Vec<f64>,
}

/// Anything that turns observations into wheel commands.
pub trait Controller {
    fn act(&mut self, obs: &Observation) -> Result<WheelCommand, HarnessError>;
}

impl<F> Controller for F
where
    F: FnMut(&Observation) -> Result<WheelCommand, HarnessError>,
{
    fn act(&mut self, obs: &Observation) -> Result<WheelCommand, HarnessError> {
        self(obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub v_l: f64,
    pub v_r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    Goal,
    MaxSteps,
    SessionFailure,
}

impl EpisodeEnd {
    fn as_str(self) -> &'static str {
        match self {
            EpisodeEnd::Goal => "goal",
            EpisodeEnd::MaxSteps => "max_steps",
            EpisodeEnd::SessionFailure => "session_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
    pub collisions: u32,
    pub d_min: f64,
    pub d0: f64,
    pub goal_reached: bool,
    pub steps_used: u32,
    pub start: Pixel,
    pub goal: Pixel,
    pub seed: u64,
    pub end: EpisodeEnd,
    /// Occupancy PNG the episode ran on, when known.
    pub grid_path: Option<String>,
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("controller session failed at step {step}: {source}")]
    Session {
        step: u32,
        source: HarnessError,
        partial: Box<EpisodeLog>,
    },
    #[error("cannot place robot: {0}")]
    NoFreeCell(#[from] GridError),
    #[error("invalid robot config {0}")]
    InvalidConfig(String),
    #[error("episode log line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl EpisodeError {
    pub fn step(&self) -> Option<u32> {
        match self {
            EpisodeError::Session { step, .. } => Some(*step),
            _ => None,
        }
    }
}

/// Runs one episode from the snapped start until the goal tolerance is met,
/// the step budget runs out, or the controller fails.
pub fn run_episode(
    grid: &OccupancyGrid,
    task: &TaskSpec,
    cfg: &RobotConfig,
    controller: &mut dyn Controller,
    seed: u64,
) -> Result<EpisodeLog, EpisodeError> {
    cfg.validate()?;
    let start = grid.nearest_free(task.start, SNAP_RADIUS)?;
    let goal = grid.nearest_free(task.goal, SNAP_RADIUS)?;
    let mut state = RobotState::new(f64::from(start.x), f64::from(start.y), cfg.theta0);
    let d0 = state.distance_to(goal);
    let mut log = EpisodeLog {
        records: Vec::new(),
        collisions: 0,
        d_min: d0,
        d0,
        goal_reached: d0 < task.goal_tol,
        steps_used: 0,
        start,
        goal,
        seed,
        end: EpisodeEnd::MaxSteps,
        grid_path: None,
    };

    while !log.goal_reached && log.steps_used < task.max_steps {
        let obs = Observation {
            t: log.steps_used,
            pose: [state.x, state.y, state.theta],
            rays: raycast(&state, cfg, grid),
        };
        let cmd = match controller.act(&obs) {
            Ok(cmd) => cmd.clamped(cfg.v_max),
            Err(source) => {
                log.end = EpisodeEnd::SessionFailure;
                return Err(EpisodeError::Session {
                    step: log.steps_used,
                    source,
                    partial: Box::new(log),
                });
            }
        };
        let (next, collided) = step(state, cmd, cfg, grid);
        state = next;
        if collided {
            log.collisions += 1;
        }
        log.records.push(StepRecord {
            step: log.steps_used,
            x: state.x,
            y: state.y,
            v_l: cmd.v_l,
            v_r: cmd.v_r,
        });
        log.steps_used += 1;
        let d = state.distance_to(goal);
        log.d_min = log.d_min.min(d);
        log.goal_reached = d < task.goal_tol;
    }
    log.end = if log.goal_reached {
        EpisodeEnd::Goal
    } else {
        EpisodeEnd::MaxSteps
    };
    Ok(log)
}

const LOG_HEADER: &str = "step,x,y,v_l,v_r";
const SUMMARY_MARKER: &str = "[summary]";

impl EpisodeLog {
    pub fn final_position(&self) -> (f64, f64) {
        self.records
            .last()
            .map(|r| (r.x, r.y))
            .unwrap_or((f64::from(self.start.x), f64::from(self.start.y)))
    }

    pub fn final_distance(&self) -> f64 {
        let (x, y) = self.final_position();
        (x - f64::from(self.goal.x)).hypot(y - f64::from(self.goal.y))
    }

    /// One `step,x,y,v_l,v_r` line per record followed by a `key=value`
    /// summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.step, r.x, r.y, r.v_l, r.v_r
            );
        }
        out.push_str(SUMMARY_MARKER);
        out.push('\n');
        let _ = writeln!(out, "steps_used={}", self.steps_used);
        let _ = writeln!(out, "collisions={}", self.collisions);
        let _ = writeln!(out, "d0={:.6}", self.d0);
        let _ = writeln!(out, "d_min={:.6}", self.d_min);
        let _ = writeln!(out, "goal_reached={}", self.goal_reached);
        let _ = writeln!(out, "end={}", self.end.as_str());
        let _ = writeln!(out, "start={},{}", self.start.x, self.start.y);
        let _ = writeln!(out, "goal={},{}", self.goal.x, self.goal.y);
        let _ = writeln!(out, "seed={}", self.seed);
        if let Some(g) = &self.grid_path {
            let _ = writeln!(out, "grid={g}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EpisodeError> {
        let err = |line: usize, message: String| EpisodeError::Parse { line, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, LOG_HEADER)) => {}
            other => {
                return Err(err(1, format!("expected header {LOG_HEADER:?}, got {other:?}")));
            }
        }
        let mut records = Vec::new();
        let mut in_summary = false;
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in lines {
            let n = i + 1;
            if line == SUMMARY_MARKER {
                in_summary = true;
                continue;
            }
            if in_summary {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(n, format!("expected key=value, got {line:?}")))?;
                kv.insert(k.to_string(), (n, v.to_string()));
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(err(n, format!("expected 5 fields, got {}", fields.len())));
            }
            let num = |s: &str| -> Result<f64, EpisodeError> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(n, format!("bad number {s:?}")))
            };
            records.push(StepRecord {
                step: fields[0]
                    .parse()
                    .map_err(|_| err(n, format!("bad step {:?}", fields[0])))?,
                x: num(fields[1])?,
                y: num(fields[2])?,
                v_l: num(fields[3])?,
                v_r: num(fields[4])?,
            });
        }
        let get = |key: &str| -> Result<(usize, String), EpisodeError> {
            kv.get(key)
                .cloned()
                .ok_or_else(|| err(0, format!("summary is missing {key}")))
        };
        fn parse_as<T: std::str::FromStr>(
            (n, v): (usize, String),
        ) -> Result<T, EpisodeError> {
            v.parse().map_err(|_| EpisodeError::Parse {
                line: n,
                message: format!("bad value {v:?}"),
            })
        }
        let pixel = |(n, v): (usize, String)| -> Result<Pixel, EpisodeError> {
            let (x, y) = v
                .split_once(',')
                .ok_or_else(|| err(n, format!("bad pixel {v:?}")))?;
            Ok(Pixel::new(
                parse_as((n, x.to_string()))?,
                parse_as((n, y.to_string()))?,
            ))
        };
        let end = match get("end")?.1.as_str() {
            "goal" => EpisodeEnd::Goal,
            "max_steps" => EpisodeEnd::MaxSteps,
            "session_failure" => EpisodeEnd::SessionFailure,
            other => return Err(err(0, format!("unknown end reason {other:?}"))),
        };
        Ok(EpisodeLog {
            records,
            collisions: parse_as(get("collisions")?)?,
            d_min: parse_as(get("d_min")?)?,
            d0: parse_as(get("d0")?)?,
            goal_reached: parse_as(get("goal_reached")?)?,
            steps_used: parse_as(get("steps_used")?)?,
            start: pixel(get("start")?)?,
            goal: pixel(get("goal")?)?,
            seed: parse_as(get("seed")?)?,
            end,
            grid_path: kv.get("grid").map(|(_, v)| v.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RobotConfig {
        RobotConfig {
            body_radius: 0.0,
            ..RobotConfig::default()
        }
    }

    #[test]
    fn straight_line() {
        let grid = OccupancyGrid::new(20, 20);
        let (s, hit) = step(RobotState::new(5.0, 5.0, 0.0), WheelCommand::new(1.5, 1.5), &cfg(), &grid);
        assert!(!hit);
        assert_eq!((s.x, s.y, s.theta), (6.5, 5.0, 0.0));
    }

    #[test]
    fn spin_in_place() {
        let grid = OccupancyGrid::new(20, 20);
        let c = cfg();
        let (s, _) = step(RobotState::new(5.0, 5.0, 0.5), WheelCommand::new(-1.0, 1.0), &c, &grid);
        assert_eq!((s.x, s.y), (5.0, 5.0));
        assert!((s.theta - (0.5 + 2.0 / c.axle_length)).abs() < 1e-12);
    }

    #[test]
    fn one_wheel_turn_rate_matches_substep_integration() {
        let grid = OccupancyGrid::new(40, 40);
        let c = cfg();
        let v = 1.2;
        let start = RobotState::new(20.0, 20.0, 0.3);
        let (s, _) = step(start, WheelCommand::new(0.0, v), &c, &grid);
        // integrate theta' = (v_r - v_l) / L over one step in 100 substeps
        let mut theta = start.theta;
        for _ in 0..100 {
            theta += 0.01 * (v - 0.0) / c.axle_length;
        }
        assert!((s.theta - theta).abs() < 1e-6);
        assert!((s.x - (20.0 + 0.5 * v * 0.3f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn commands_are_clamped() {
        let grid = OccupancyGrid::new(40, 40);
        let c = cfg();
        let (s, _) = step(RobotState::new(10.0, 10.0, 0.0), WheelCommand::new(10.0, 10.0), &c, &grid);
        assert_eq!(s.x, 10.0 + c.v_max);
    }

    #[test]
    fn blocked_move_reverts_position_but_turns() {
        let mut grid = OccupancyGrid::new(20, 20);
        grid.set(Pixel::new(6, 5), true);
        let c = cfg();
        let (s, hit) = step(RobotState::new(5.0, 5.0, 0.0), WheelCommand::new(0.9, 1.1), &c, &grid);
        assert!(hit);
        assert_eq!((s.x, s.y), (5.0, 5.0));
        assert!(s.theta > 0.0);
    }

    #[test]
    fn leaving_the_map_is_a_collision() {
        let grid = OccupancyGrid::new(10, 10);
        let (s, hit) = step(RobotState::new(9.0, 5.0, 0.0), WheelCommand::new(1.0, 1.0), &cfg(), &grid);
        assert!(hit);
        assert_eq!(s.x, 9.0);
    }

    /// Entry distance of the ray into the closed box, if any.
    fn slab_entry(x: f64, y: f64, dx: f64, dy: f64, lo: (f64, f64), hi: (f64, f64)) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for (o, d, l, h) in [(x, dx, lo.0, hi.0), (y, dy, lo.1, hi.1)] {
            if d.abs() < 1e-15 {
                if o < l || o > h {
                    return None;
                }
            } else {
                let (a, b) = ((l - o) / d, (h - o) / d);
                t0 = t0.max(a.min(b));
                t1 = t1.min(a.max(b));
            }
        }
        (t0 <= t1).then_some(t0)
    }

    /// Brute force over every obstacle cell plus the map boundary.
    fn exact_ray(grid: &OccupancyGrid, x: f64, y: f64, angle: f64, range: f64) -> f64 {
        let (dx, dy) = (angle.cos(), angle.sin());
        let (w, h) = (grid.width() as f64, grid.height() as f64);
        // leaving the map box
        let mut exit = f64::INFINITY;
        for (o, d, l, hi) in [(x, dx, -0.5, w - 0.5), (y, dy, -0.5, h - 0.5)] {
            if d > 1e-15 {
                exit = exit.min((hi - o) / d);
            } else if d < -1e-15 {
                exit = exit.min((l - o) / d);
            }
        }
        let hit = grid
            .pixels()
            .filter(|&p| grid.is_occupied(p))
            .filter_map(|p| {
                let (cx, cy) = (f64::from(p.x), f64::from(p.y));
                slab_entry(x, y, dx, dy, (cx - 0.5, cy - 0.5), (cx + 0.5, cy + 0.5))
            })
            .fold(f64::INFINITY, f64::min);
        hit.min(exit).min(range)
    }

    #[test]
    fn rays_on_empty_grid_hit_the_map_edge_or_cap() {
        let grid = OccupancyGrid::new(200, 200);
        let c = RobotConfig {
            sensor_range: 30.0,
            ..cfg()
        };
        let rays = raycast(&RobotState::new(100.0, 100.0, 1.0), &c, &grid);
        assert_eq!(rays.len(), 16);
        assert!(rays.iter().all(|&r| r == 30.0));
    }

    #[test]
    fn wall_ten_pixels_ahead() {
        let mut grid = OccupancyGrid::new(40, 20);
        for y in 0..20 {
            grid.set(Pixel::new(15, y), true);
        }
        // near face of column 15 is x = 14.5
        let rays = raycast(&RobotState::new(4.5, 10.0, 0.0), &cfg(), &grid);
        assert!((rays[0] - 10.0).abs() <= 0.5, "{}", rays[0]);
        assert!((rays[0] - exact_ray(&grid, 4.5, 10.0, 0.0, 60.0)).abs() <= 1e-9);
    }

    #[test]
    fn origin_inside_obstacle_reads_zero() {
        let mut grid = OccupancyGrid::new(10, 10);
        grid.set(Pixel::new(5, 5), true);
        let rays = raycast(&RobotState::new(5.2, 4.9, 0.0), &cfg(), &grid);
        assert!(rays.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn raycast_matches_exact_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let cells = (0..30 * 30).map(|_| rng.random_bool(0.1)).collect();
            let grid = OccupancyGrid::from_cells(30, 30, cells).unwrap();
            let s = RobotState::new(rng.random_range(0.0..29.0), rng.random_range(0.0..29.0), rng.random_range(0.0..TAU));
            let c = RobotConfig {
                sensor_range: 20.0,
                ..cfg()
            };
            for (k, r) in raycast(&s, &c, &grid).iter().enumerate() {
                let a = s.theta + TAU * k as f64 / 16.0;
                let oracle = exact_ray(&grid, s.x, s.y, a, 20.0);
                assert!((r - oracle).abs() <= 1e-9, "ray {k}: {r} vs {oracle}");
            }
        }
    }

    #[test]
    fn rays_shrink_as_obstacles_are_added() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut grid = OccupancyGrid::new(30, 30);
        let s = RobotState::new(15.0, 15.0, 0.7);
        let c = cfg();
        let mut prev = raycast(&s, &c, &grid);
        for _ in 0..60 {
            let p = Pixel::new(rng.random_range(0..30), rng.random_range(0..30));
            if p == Pixel::new(15, 15) {
                continue;
            }
            grid.set(p, true);
            let now = raycast(&s, &c, &grid);
            assert!(now.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = now;
        }
    }

    #[test]
    fn idle_controller_episode() {
        let grid = OccupancyGrid::new(60, 60);
        let task = TaskSpec {
            max_steps: 50,
            ..TaskSpec::new(Pixel::new(5, 5), Pixel::new(50, 50))
        };
        let mut idle = |_: &Observation| Ok(WheelCommand::new(0.0, 0.0));
        let log = run_episode(&grid, &task, &RobotConfig::default(), &mut idle, 1).unwrap();
        assert!(!log.goal_reached);
        assert_eq!(log.steps_used, 50);
        assert_eq!(log.records.len(), 50);
        assert_eq!(log.collisions, 0);
        assert_eq!(log.d_min, log.d0);
        assert_eq!(log.end, EpisodeEnd::MaxSteps);
    }

    #[test]
    fn driving_into_a_wall() {
        // wall at column 10; robot on row 5 facing +x, body radius 0
        let mut grid = OccupancyGrid::new(20, 11);
        for y in 0..11 {
            grid.set(Pixel::new(10, y), true);
        }
        let task = TaskSpec {
            max_steps: 10,
            goal_tol: 2.0,
            ..TaskSpec::new(Pixel::new(6, 5), Pixel::new(18, 5))
        };
        let c = RobotConfig {
            theta0: 0.0,
            ..cfg()
        };
        let mut forward = |_: &Observation| Ok(WheelCommand::new(1.0, 1.0));
        let log = run_episode(&grid, &task, &c, &mut forward, 0).unwrap();
        // x: 7, 8, 9 accepted; 10 lands in the wall cell and every later step is reverted
        let xs: Vec<f64> = log.records.iter().map(|r| r.x).collect();
        assert_eq!(xs, vec![7.0, 8.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]);
        assert_eq!(log.collisions, 7);
        assert!(!log.goal_reached);
    }

    #[test]
    fn session_failure_carries_step() {
        let grid = OccupancyGrid::new(30, 30);
        let task = TaskSpec::new(Pixel::new(2, 2), Pixel::new(28, 28));
        let mut flaky = |obs: &Observation| {
            if obs.t == 3 {
                Err(HarnessError::Timeout {
                    waited: std::time::Duration::from_secs(2),
                })
            } else {
                Ok(WheelCommand::new(0.5, 0.5))
            }
        };
        let err = run_episode(&grid, &task, &RobotConfig::default(), &mut flaky, 0).unwrap_err();
        assert_eq!(err.step(), Some(3));
        match err {
            EpisodeError::Session { partial, .. } => {
                assert_eq!(partial.records.len(), 3);
                assert_eq!(partial.end, EpisodeEnd::SessionFailure);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn log_text_round_trip_and_determinism() {
        let grid = OccupancyGrid::new(60, 60);
        let task = TaskSpec {
            max_steps: 40,
            ..TaskSpec::new(Pixel::new(5, 5), Pixel::new(50, 50))
        };
        let mut wiggle = |obs: &Observation| Ok(WheelCommand::new(1.0 + (obs.t % 3) as f64 * 0.1, 1.2));
        let a = run_episode(&grid, &task, &RobotConfig::default(), &mut wiggle, 9).unwrap();
        let b = run_episode(&grid, &task, &RobotConfig::default(), &mut wiggle, 9).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let text = a.to_text();
        let parsed = EpisodeLog::from_text(&text).unwrap();
        assert_eq!(parsed.to_text(), text);
        assert!(text.lines().nth(1).unwrap().split(',').count() == 5);
        assert!(EpisodeLog::from_text("nope").is_err());
    }

    proptest::proptest! {
        #[test]
        fn rotation_never_moves(theta in 0.0..TAU, v in -3.0..3.0f64) {
            let grid = OccupancyGrid::new(10, 10);
            let (s, hit) = step(RobotState::new(4.0, 4.0, theta), WheelCommand::new(-v, v), &RobotConfig::default(), &grid);
            proptest::prop_assert!(!hit);
            proptest::prop_assert_eq!((s.x, s.y), (4.0, 4.0));
            proptest::prop_assert!((0.0..TAU).contains(&s.theta));
        }

        #[test]
        fn zero_collisions_means_no_overlap(
            cells in proptest::collection::vec(proptest::bool::weighted(0.06), 900),
            cmds in proptest::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 60),
        ) {
            let grid = OccupancyGrid::from_cells(30, 30, cells).unwrap();
            let task = TaskSpec { max_steps: 60, ..TaskSpec::new(Pixel::new(15, 15), Pixel::new(1, 1)) };
            let cfg = RobotConfig::default();
            let mut i = 0;
            let mut scripted = |_: &Observation| { let c = cmds[i % cmds.len()]; i += 1; Ok(WheelCommand::new(c.0, c.1)) };
            if let Ok(log) = run_episode(&grid, &task, &cfg, &mut scripted, 0) {
                let start_ok = !body_overlaps(&grid, f64::from(log.start.x), f64::from(log.start.y), cfg.body_radius);
                if start_ok {
                    for r in &log.records {
                        proptest::prop_assert!(!body_overlaps(&grid, r.x, r.y, cfg.body_radius));
                    }
                }
            }
        }
    }
}
