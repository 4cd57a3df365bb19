//! Grid search over preprocessing candidates.
//!
//! Every candidate shares the Otsu threshold of the input and varies
//! polarity, inflation radius and cleanup strength. A candidate is feasible
//! when both task endpoints are free and connected; feasible candidates are
//! ranked by
//!
//! ```text
//! score = 2.5 * min_clearance - 0.02 * path_length - 1.2 * sharpness
//! ```
//!
//! measured along the A* route between the endpoints.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::occgrid::{
    binarize, distance_field, otsu_threshold, refine, GrayImage, OccupancyGrid, Pixel, Polarity,
    DEFAULT_CLEARANCE_CAP,
};
use crate::planner::{astar, path_metrics};
use crate::sim2d::RobotConfig;

pub const CLEARANCE_WEIGHT: f64 = 2.5;
pub const LENGTH_WEIGHT: f64 = 0.02;
pub const SHARPNESS_WEIGHT: f64 = 1.2;

pub const POLARITIES: [Polarity; 2] = [Polarity::Dark, Polarity::Light];
pub const INFLATE_RADII: [u32; 4] = [0, 1, 2, 3];
pub const CLEANUP_LEVELS: [u32; 5] = [0, 4, 8, 12, 16];

#[derive(Debug, Error)]
pub enum MapOptError {
    #[error("all {0} preprocessing candidates are infeasible")]
    NoFeasibleCandidate(usize),
    #[error("task endpoint {point} lies outside the {width}x{height} image")]
    EndpointOutOfBounds {
        point: Pixel,
        width: usize,
        height: usize,
    },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("params file {path}: {source}")]
    ParamsIo {
        path: String,
        source: std::io::Error,
    },
    #[error("params file {path}: {source}")]
    ParamsFormat {
        path: String,
        source: serde_json::Error,
    },
}

/// One preprocessing candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub threshold: u8,
    pub polarity: Polarity,
    pub inflate: u32,
    pub cleanup: u32,
}

impl PreprocessParams {
    pub fn build_grid(&self, img: &GrayImage) -> OccupancyGrid {
        refine(
            &binarize(img, self.threshold, self.polarity),
            self.cleanup,
            self.inflate,
        )
    }
}

/// Why a candidate scored negative infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasibility {
    StartBlocked,
    GoalBlocked,
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub min_clearance: f64,
    pub path_length: f64,
    pub sharpness: u32,
    /// Negative infinity iff `infeasible` is set.
    pub score: f64,
    pub infeasible: Option<Infeasibility>,
}

impl ScoreBreakdown {
    pub fn feasible(min_clearance: f64, path_length: f64, sharpness: u32) -> Self {
        Self {
            min_clearance,
            path_length,
            sharpness,
            score: CLEARANCE_WEIGHT * min_clearance
                - LENGTH_WEIGHT * path_length
                - SHARPNESS_WEIGHT * f64::from(sharpness),
            infeasible: None,
        }
    }

    pub fn infeasible(reason: Infeasibility) -> Self {
        Self {
            min_clearance: 0.0,
            path_length: 0.0,
            sharpness: 0,
            score: f64::NEG_INFINITY,
            infeasible: Some(reason),
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.infeasible.is_none()
    }
}

/// Start, goal and the rollout budgets every controller is held to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub start: Pixel,
    pub goal: Pixel,
    pub goal_tol: f64,
    pub max_steps: u32,
    pub progress_window: u32,
    pub progress_ratio: f64,
}

impl TaskSpec {
    pub const DEFAULT_GOAL_TOL: f64 = 20.0;
    pub const DEFAULT_MAX_STEPS: u32 = 2500;
    pub const DEFAULT_PROGRESS_WINDOW: u32 = 400;
    pub const DEFAULT_PROGRESS_RATIO: f64 = 0.7;

    pub fn new(start: Pixel, goal: Pixel) -> Self {
        Self {
            start,
            goal,
            goal_tol: Self::DEFAULT_GOAL_TOL,
            max_steps: Self::DEFAULT_MAX_STEPS,
            progress_window: Self::DEFAULT_PROGRESS_WINDOW,
            progress_ratio: Self::DEFAULT_PROGRESS_RATIO,
        }
    }

    pub fn validate(&self) -> Result<(), MapOptError> {
        if self.goal_tol.is_nan() || self.goal_tol <= 0.0 {
            return Err(MapOptError::InvalidTask(format!(
                "goal_tol must be positive, got {}",
                self.goal_tol
            )));
        }
        if self.progress_window > self.max_steps {
            return Err(MapOptError::InvalidTask(format!(
                "progress_window {} exceeds max_steps {}",
                self.progress_window, self.max_steps
            )));
        }
        if !(self.progress_ratio > 0.0 && self.progress_ratio < 1.0) {
            return Err(MapOptError::InvalidTask(format!(
                "progress_ratio must be in (0, 1), got {}",
                self.progress_ratio
            )));
        }
        Ok(())
    }
}

/// All 40 candidates for a threshold, ordered by polarity (dark first),
/// then inflation, then cleanup.
pub fn enumerate_candidates(threshold: u8) -> Vec<PreprocessParams> {
    let mut out = Vec::with_capacity(POLARITIES.len() * INFLATE_RADII.len() * CLEANUP_LEVELS.len());
    for polarity in POLARITIES {
        for inflate in INFLATE_RADII {
            for cleanup in CLEANUP_LEVELS {
                out.push(PreprocessParams {
                    threshold,
                    polarity,
                    inflate,
                    cleanup,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub grid: OccupancyGrid,
    pub params: PreprocessParams,
    pub score: ScoreBreakdown,
}

/// Candidate scoring with a configurable clearance cap.
#[derive(Debug, Clone, Copy)]
pub struct Scorer {
    pub clearance_cap: f64,
}

impl Default for Scorer {
    fn default() -> Self {
        Self {
            clearance_cap: DEFAULT_CLEARANCE_CAP,
        }
    }
}

impl Scorer {
    pub fn score_grid(&self, grid: &OccupancyGrid, task: &TaskSpec) -> ScoreBreakdown {
        if grid.is_occupied(task.start) {
            return ScoreBreakdown::infeasible(Infeasibility::StartBlocked);
        }
        if grid.is_occupied(task.goal) {
            return ScoreBreakdown::infeasible(Infeasibility::GoalBlocked);
        }
        match astar(grid, task.start, task.goal) {
            Ok(path) => {
                let field = distance_field(grid, self.clearance_cap);
                let m = path_metrics(&path, &field);
                ScoreBreakdown::feasible(m.min_clearance, m.path_length, m.sharpness)
            }
            Err(_) => ScoreBreakdown::infeasible(Infeasibility::Disconnected),
        }
    }

    pub fn score_candidate(
        &self,
        img: &GrayImage,
        params: &PreprocessParams,
        task: &TaskSpec,
    ) -> (OccupancyGrid, ScoreBreakdown) {
        let grid = params.build_grid(img);
        let score = self.score_grid(&grid, task);
        (grid, score)
    }

    /// Highest-scoring feasible candidate; ties go to the earliest in
    /// enumeration order regardless of scheduling.
    pub fn select_best(&self, img: &GrayImage, task: &TaskSpec) -> Result<Selection, MapOptError> {
        for p in [task.start, task.goal] {
            if p.x < 0 || p.y < 0 || p.x as usize >= img.width() || p.y as usize >= img.height() {
                return Err(MapOptError::EndpointOutOfBounds {
                    point: p,
                    width: img.width(),
                    height: img.height(),
                });
            }
        }
        let candidates = enumerate_candidates(otsu_threshold(img));
        let scored: Vec<(OccupancyGrid, ScoreBreakdown)> = candidates
            .par_iter()
            .map(|c| self.score_candidate(img, c, task))
            .collect();

        let mut best: Option<usize> = None;
        for (i, (_, s)) in scored.iter().enumerate() {
            if !s.is_feasible() {
                continue;
            }
            if best.is_none_or(|b| s.score > scored[b].1.score) {
                best = Some(i);
            }
        }
        let i = best.ok_or(MapOptError::NoFeasibleCandidate(candidates.len()))?;
        let (grid, score) = scored.into_iter().nth(i).expect("index from enumeration");
        Ok(Selection {
            grid,
            params: candidates[i],
            score,
        })
    }
}

pub fn score_candidate(
    img: &GrayImage,
    params: &PreprocessParams,
    task: &TaskSpec,
) -> (OccupancyGrid, ScoreBreakdown) {
    Scorer::default().score_candidate(img, params, task)
}

pub fn select_best(img: &GrayImage, task: &TaskSpec) -> Result<Selection, MapOptError> {
    Scorer::default().select_best(img, task)
}

/// Contents of `params.json`: the chosen preprocessing plus the robot and
/// task fields handed to controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub width: usize,
    pub height: usize,
    pub threshold: u8,
    pub polarity: Polarity,
    pub inflate_px: u32,
    pub cleanup: u32,
    pub start: Pixel,
    pub goal: Pixel,
    pub axle_length_px: f64,
    pub sensor_range_px: f64,
    pub n_rays: u32,
    pub v_max: f64,
    pub goal_tol_px: f64,
    pub max_steps: u32,
}

impl ParamsFile {
    pub fn new(selection: &Selection, task: &TaskSpec, robot: &RobotConfig) -> Self {
        Self {
            width: selection.grid.width(),
            height: selection.grid.height(),
            threshold: selection.params.threshold,
            polarity: selection.params.polarity,
            inflate_px: selection.params.inflate,
            cleanup: selection.params.cleanup,
            start: task.start,
            goal: task.goal,
            axle_length_px: robot.axle_length,
            sensor_range_px: robot.sensor_range,
            n_rays: robot.n_rays,
            v_max: robot.v_max,
            goal_tol_px: task.goal_tol,
            max_steps: task.max_steps,
        }
    }

    /// Task with the default progress window and ratio.
    pub fn task(&self) -> TaskSpec {
        TaskSpec {
            goal_tol: self.goal_tol_px,
            max_steps: self.max_steps,
            progress_window: TaskSpec::DEFAULT_PROGRESS_WINDOW.min(self.max_steps),
            ..TaskSpec::new(self.start, self.goal)
        }
    }

    /// Robot with the default heading and body radius.
    pub fn robot(&self) -> RobotConfig {
        RobotConfig {
            axle_length: self.axle_length_px,
            sensor_range: self.sensor_range_px,
            n_rays: self.n_rays,
            v_max: self.v_max,
            ..RobotConfig::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapOptError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| MapOptError::ParamsIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapOptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| MapOptError::ParamsIo {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| MapOptError::ParamsFormat {
            path: path.display().to_string(),
            source,
        })
    }
}
