//! A* reference routes on occupancy grids and the route metrics used for
//! preprocessing selection.
//!
//! Moves are 8-connected with no corner cutting, matching
//! [`OccupancyGrid::is_connected`], so a route exists exactly when the
//! endpoints are connected.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::occgrid::{DistanceField, OccupancyGrid, Pixel};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("no path from {from} to {to}")]
    NoPath { from: Pixel, to: Pixel },
    #[error("endpoint {0} is not a free cell")]
    BlockedEndpoint(Pixel),
}

/// Route cost `straight + diagonal * sqrt(2)`, kept as exact step counts so
/// that comparisons never suffer rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Cost {
    pub straight: u32,
    pub diagonal: u32,
}

impl Cost {
    pub const ZERO: Cost = Cost {
        straight: 0,
        diagonal: 0,
    };

    /// Octile distance between two cells.
    pub fn octile(a: Pixel, b: Pixel) -> Cost {
        let dx = (a.x - b.x).unsigned_abs();
        let dy = (a.y - b.y).unsigned_abs();
        Cost {
            straight: dx.max(dy) - dx.min(dy),
            diagonal: dx.min(dy),
        }
    }

    pub fn step(diagonal: bool) -> Cost {
        if diagonal {
            Cost {
                straight: 0,
                diagonal: 1,
            }
        } else {
            Cost {
                straight: 1,
                diagonal: 0,
            }
        }
    }

    pub fn value(self) -> f64 {
        f64::from(self.straight) + f64::from(self.diagonal) * std::f64::consts::SQRT_2
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, rhs: Cost) -> Cost {
        Cost {
            straight: self.straight + rhs.straight,
            diagonal: self.diagonal + rhs.diagonal,
        }
    }
}

impl Ord for Cost {
    fn cmp(&self, other: &Self) -> Ordering {
        // a + b√2 vs c + d√2  <=>  (a - c) vs (d - b)√2
        let p = i64::from(self.straight) - i64::from(other.straight);
        let q = i64::from(other.diagonal) - i64::from(self.diagonal);
        match (p.signum(), q.signum()) {
            (0, 0) => Ordering::Equal,
            (ps, qs) if ps <= 0 && qs >= 0 => Ordering::Less,
            (ps, qs) if ps >= 0 && qs <= 0 => Ordering::Greater,
            (1, 1) => (p * p).cmp(&(2 * q * q)),
            _ => (2 * q * q).cmp(&(p * p)),
        }
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.value())
    }
}

/// Ordered waypoints between two free cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path {
    pub waypoints: Vec<Pixel>,
}

impl Path {
    pub fn cost(&self) -> Cost {
        self.waypoints
            .windows(2)
            .map(|w| Cost::step(w[0].x != w[1].x && w[0].y != w[1].y))
            .fold(Cost::ZERO, |acc, c| acc + c)
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }
}

/// Shortest route under unit orthogonal and `sqrt(2)` diagonal steps.
///
/// Octile heuristic; entries with equal `f` pop in insertion order.
pub fn astar(grid: &OccupancyGrid, from: Pixel, to: Pixel) -> Result<Path, PlanError> {
    for p in [from, to] {
        if grid.is_occupied(p) {
            return Err(PlanError::BlockedEndpoint(p));
        }
    }
    let w = grid.width();
    let idx = |p: Pixel| p.y as usize * w + p.x as usize;
    let n = w * grid.height();
    let mut best: Vec<Option<Cost>> = vec![None; n];
    let mut parent: Vec<Option<Pixel>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;

    best[idx(from)] = Some(Cost::ZERO);
    open.push(Reverse((Cost::octile(from, to), seq, from)));

    while let Some(Reverse((_, _, p))) = open.pop() {
        let pi = idx(p);
        if closed[pi] {
            continue;
        }
        closed[pi] = true;
        if p == to {
            let mut waypoints = vec![p];
            let mut cur = p;
            while let Some(prev) = parent[idx(cur)] {
                waypoints.push(prev);
                cur = prev;
            }
            waypoints.reverse();
            return Ok(Path { waypoints });
        }
        let g = best[pi].expect("popped cells have a cost");
        for (q, diagonal) in grid.free_moves(p) {
            let qi = idx(q);
            if closed[qi] {
                continue;
            }
            let candidate = g + Cost::step(diagonal);
            if best[qi].is_none_or(|old| candidate < old) {
                best[qi] = Some(candidate);
                parent[qi] = Some(p);
                seq += 1;
                open.push(Reverse((candidate + Cost::octile(q, to), seq, q)));
            }
        }
    }
    Err(PlanError::NoPath { from, to })
}

/// Route inputs to the preprocessing score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub min_clearance: f64,
    pub path_length: f64,
    /// Number of heading changes between consecutive steps.
    pub sharpness: u32,
}

pub fn path_metrics(path: &Path, field: &DistanceField) -> PathMetrics {
    let min_clearance = path
        .waypoints
        .iter()
        .map(|&p| field.at(p))
        .fold(f64::INFINITY, f64::min);
    let steps: Vec<(i32, i32)> = path
        .waypoints
        .windows(2)
        .map(|w| (w[1].x - w[0].x, w[1].y - w[0].y))
        .collect();
    let sharpness = steps.windows(2).filter(|s| s[0] != s[1]).count() as u32;
    PathMetrics {
        min_clearance: if path.is_empty() { 0.0 } else { min_clearance },
        path_length: path.cost().value(),
        sharpness,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occgrid::distance_field;

    fn px(x: i32, y: i32) -> Pixel {
        Pixel::new(x, y)
    }

    #[test]
    fn trivial_route() {
        let grid = OccupancyGrid::new(3, 3);
        let path = astar(&grid, px(1, 1), px(1, 1)).unwrap();
        assert_eq!(path.waypoints, vec![px(1, 1)]);
        assert_eq!(path.cost(), Cost::ZERO);
    }

    #[test]
    fn diagonal_across_empty_grid() {
        let grid = OccupancyGrid::new(3, 3);
        let path = astar(&grid, px(0, 0), px(2, 2)).unwrap();
        assert_eq!(path.len(), 3);
        assert_eq!(
            path.cost(),
            Cost {
                straight: 0,
                diagonal: 2
            }
        );
        assert!((path.cost().value() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wall_blocks() {
        let grid = OccupancyGrid::from_ascii(&["..#..", "..#..", "..#.."]);
        assert_eq!(
            astar(&grid, px(0, 0), px(4, 2)),
            Err(PlanError::NoPath {
                from: px(0, 0),
                to: px(4, 2)
            })
        );
        assert_eq!(
            astar(&grid, px(2, 0), px(4, 2)),
            Err(PlanError::BlockedEndpoint(px(2, 0)))
        );
    }

    #[test]
    fn no_corner_cutting() {
        let grid = OccupancyGrid::from_ascii(&[".#.", "#..", "..."]);
        assert!(astar(&grid, px(0, 0), px(2, 2)).is_err());
        let grid = OccupancyGrid::from_ascii(&["..", "#."]);
        let path = astar(&grid, px(0, 0), px(1, 1)).unwrap();
        assert_eq!(path.waypoints, vec![px(0, 0), px(1, 0), px(1, 1)]);
    }

    #[test]
    fn cost_ordering_is_exact() {
        let c = |s, d| Cost {
            straight: s,
            diagonal: d,
        };
        assert!(c(2, 0) < c(0, 2)); // 2 < 2.83
        assert!(c(3, 0) > c(0, 2)); // 3 > 2.83
        assert!(c(1, 1) < c(3, 0));
        assert!(c(0, 7) < c(10, 0)); // 9.899 < 10
        assert!(c(0, 8) > c(11, 0)); // 11.31 > 11
        assert_eq!(c(4, 4).cmp(&c(4, 4)), Ordering::Equal);
        for a in 0..20 {
            for b in 0..20 {
                for x in 0..20 {
                    for y in 0..20 {
                        let (l, r) = (c(a, b), c(x, y));
                        if l != r {
                            assert_eq!(l.cmp(&r), l.value().partial_cmp(&r.value()).unwrap());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn straight_and_l_shaped_metrics() {
        let grid = OccupancyGrid::new(8, 8);
        let field = distance_field(&grid, 50.0);
        let straight = Path {
            waypoints: (0..5).map(|x| px(x, 2)).collect(),
        };
        let m = path_metrics(&straight, &field);
        assert_eq!(m.path_length, 4.0);
        assert_eq!(m.sharpness, 0);
        assert_eq!(m.min_clearance, 50.0);

        let l_shape = Path {
            waypoints: vec![px(0, 0), px(1, 0), px(2, 0), px(2, 1), px(2, 2)],
        };
        assert_eq!(path_metrics(&l_shape, &field).sharpness, 1);
    }

    #[test]
    fn clearance_is_waypoint_minimum() {
        let mut grid = OccupancyGrid::new(10, 10);
        grid.set(px(5, 5), true);
        grid.set(px(0, 9), true);
        let field = distance_field(&grid, 50.0);
        let path = astar(&grid, px(0, 0), px(9, 9)).unwrap();
        let obstacles = [px(5, 5), px(0, 9)];
        let brute = path
            .waypoints
            .iter()
            .map(|w| obstacles.iter().map(|o| o.distance(*w)).fold(f64::INFINITY, f64::min))
            .fold(f64::INFINITY, f64::min);
        assert!((path_metrics(&path, &field).min_clearance - brute).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn route_properties(
            cells in proptest::collection::vec(proptest::bool::weighted(0.25), 100),
            ax in 0i32..10, ay in 0i32..10, bx in 0i32..10, by in 0i32..10,
        ) {
            let mut grid = OccupancyGrid::from_cells(10, 10, cells).unwrap();
            let (a, b) = (px(ax, ay), px(bx, by));
            grid.set(a, false);
            grid.set(b, false);
            let forward = astar(&grid, a, b);
            let backward = astar(&grid, b, a);
            proptest::prop_assert_eq!(forward.is_ok(), grid.is_connected(a, b));
            if let (Ok(f), Ok(r)) = (&forward, &backward) {
                proptest::prop_assert_eq!(f.cost(), r.cost());
                proptest::prop_assert_eq!(f.waypoints[0], a);
                proptest::prop_assert_eq!(*f.waypoints.last().unwrap(), b);
                for w in &f.waypoints {
                    proptest::prop_assert!(grid.is_free(*w));
                }
                for s in f.waypoints.windows(2) {
                    proptest::prop_assert!(grid.free_moves(s[0]).any(|(q, _)| q == s[1]));
                }
                let field = distance_field(&grid, 50.0);
                let m = path_metrics(f, &field);
                let steps: Vec<_> = f.waypoints.windows(2).map(|w| (w[1].x - w[0].x, w[1].y - w[0].y)).collect();
                let uniform = steps.windows(2).all(|s| s[0] == s[1]);
                proptest::prop_assert_eq!(m.sharpness == 0, uniform);
            }
        }
    }
}
