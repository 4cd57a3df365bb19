//! Occupancy grids: construction from map images and spatial queries.
//!
//! World coordinates follow the pixel-center convention: cell `(x, y)`
//! covers the unit square centered on the integer point `(x, y)`, so cell
//! boundaries lie on half-integers.

mod distance;
mod image;
mod morph;

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::distance::{distance_field, DistanceField, DEFAULT_CLEARANCE_CAP};
pub use self::image::{binarize, otsu_threshold, to_grayscale, ColorImage, GrayImage, Polarity};
pub use self::morph::refine;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("no free cell within radius {max_rad} of ({x}, {y})")]
    Exhausted { x: i32, y: i32, max_rad: u32 },
    #[error("pixel ({x}, {y}) is outside the {width}x{height} grid")]
    OutOfBounds {
        x: i32,
        y: i32,
        width: usize,
        height: usize,
    },
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("pixel buffer length {actual} does not match {width}x{height}")]
    BufferSize {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("image i/o: {0}")]
    Image(#[from] ::image::ImageError),
}

/// Integer pixel coordinate. Serializes as a two-element `[x, y]` array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Pixel {
    pub x: i32,
    pub y: i32,
}

impl Pixel {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Pixel) -> f64 {
        let dx = f64::from(self.x - other.x);
        let dy = f64::from(self.y - other.y);
        dx.hypot(dy)
    }
}

impl From<[i32; 2]> for Pixel {
    fn from([x, y]: [i32; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Pixel> for [i32; 2] {
    fn from(p: Pixel) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for Pixel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// The eight grid moves, orthogonal first.
pub(crate) const MOVES: [(i32, i32); 8] = [
    (1, 0),
    (0, 1),
    (-1, 0),
    (0, -1),
    (1, 1),
    (-1, 1),
    (-1, -1),
    (1, -1),
];

/// Boolean obstacle raster, `true` = obstacle.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl fmt::Debug for OccupancyGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "OccupancyGrid {}x{}", self.width, self.height)?;
        for y in 0..self.height {
            let row: String = self.cells[y * self.width..(y + 1) * self.width]
                .iter()
                .map(|&c| if c { '#' } else { '.' })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

impl OccupancyGrid {
    /// An all-free grid.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn from_cells(width: usize, height: usize, cells: Vec<bool>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyImage);
        }
        if cells.len() != width * height {
            return Err(GridError::BufferSize {
                width,
                height,
                actual: cells.len(),
            });
        }
        Ok(Self {
            width,
            height,
            cells,
        })
    }

    /// Parses rows of `#` (obstacle) and `.` (free). Handy for fixtures.
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut cells = Vec::with_capacity(width * height);
        for row in rows {
            assert_eq!(row.len(), width, "ragged ascii grid");
            cells.extend(row.bytes().map(|b| b == b'#'));
        }
        Self {
            width,
            height,
            cells,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn in_bounds(&self, p: Pixel) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    fn index(&self, p: Pixel) -> usize {
        p.y as usize * self.width + p.x as usize
    }

    /// `None` when `p` is out of bounds.
    pub fn get(&self, p: Pixel) -> Option<bool> {
        self.in_bounds(p).then(|| self.cells[self.index(p)])
    }

    /// Out-of-bounds cells count as occupied.
    pub fn is_occupied(&self, p: Pixel) -> bool {
        self.get(p).unwrap_or(true)
    }

    pub fn is_free(&self, p: Pixel) -> bool {
        !self.is_occupied(p)
    }

    pub fn set(&mut self, p: Pixel, occupied: bool) {
        let i = self.index(p);
        self.cells[i] = occupied;
    }

    pub fn obstacle_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn obstacle_ratio(&self) -> f64 {
        self.obstacle_count() as f64 / self.cells.len() as f64
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        (0..self.height as i32).flat_map(move |y| (0..self.width as i32).map(move |x| Pixel::new(x, y)))
    }

    pub fn transposed(&self) -> Self {
        let mut out = Self::new(self.height, self.width);
        for p in self.pixels() {
            out.set(Pixel::new(p.y, p.x), self.is_occupied(p));
        }
        out
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }

    /// Free 8-neighbors of `p` reachable without cutting an obstacle
    /// corner: a diagonal move requires both orthogonal cells it passes
    /// between to be free.
    pub fn free_moves(&self, p: Pixel) -> impl Iterator<Item = (Pixel, bool)> + '_ {
        MOVES.iter().filter_map(move |&(dx, dy)| {
            let q = Pixel::new(p.x + dx, p.y + dy);
            if self.is_occupied(q) {
                return None;
            }
            let diagonal = dx != 0 && dy != 0;
            if diagonal
                && (self.is_occupied(Pixel::new(p.x + dx, p.y))
                    || self.is_occupied(Pixel::new(p.x, p.y + dy)))
            {
                return None;
            }
            Some((q, diagonal))
        })
    }

    /// Nearest free cell by Chebyshev ring scan, row-major within a ring.
    pub fn nearest_free(&self, p: Pixel, max_rad: u32) -> Result<Pixel, GridError> {
        if !self.in_bounds(p) {
            return Err(GridError::OutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        if self.is_free(p) {
            return Ok(p);
        }
        let limit = max_rad.min((self.width.max(self.height)) as u32) as i32;
        for r in 1..=limit {
            for dy in -r..=r {
                let y = p.y + dy;
                if y < 0 || y as usize >= self.height {
                    continue;
                }
                let on_edge_row = dy.abs() == r;
                let step = if on_edge_row { 1 } else { 2 * r };
                let mut dx = -r;
                while dx <= r {
                    let q = Pixel::new(p.x + dx, y);
                    if self.is_free(q) {
                        return Ok(q);
                    }
                    dx += step;
                }
            }
        }
        Err(GridError::Exhausted {
            x: p.x,
            y: p.y,
            max_rad,
        })
    }

    /// Component labels of the free space under the no-corner-cutting move
    /// rule. Obstacle cells get `None`.
    pub fn free_components(&self) -> Vec<Option<u32>> {
        let mut labels = vec![None; self.cells.len()];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in self.pixels() {
            if self.is_occupied(start) || labels[self.index(start)].is_some() {
                continue;
            }
            labels[self.index(start)] = Some(next);
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                for (q, _) in self.free_moves(p) {
                    let qi = self.index(q);
                    if labels[qi].is_none() {
                        labels[qi] = Some(next);
                        queue.push_back(q);
                    }
                }
            }
            next += 1;
        }
        labels
    }

    /// True iff both endpoints are free and joined by free-cell moves.
    pub fn is_connected(&self, a: Pixel, b: Pixel) -> bool {
        if self.is_occupied(a) || self.is_occupied(b) {
            return false;
        }
        if a == b {
            return true;
        }
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([a]);
        seen[self.index(a)] = true;
        while let Some(p) = queue.pop_front() {
            for (q, _) in self.free_moves(p) {
                if q == b {
                    return true;
                }
                let qi = self.index(q);
                if !seen[qi] {
                    seen[qi] = true;
                    queue.push_back(q);
                }
            }
        }
        false
    }

    /// 8-bit grayscale PNG: 0 = obstacle, 255 = free.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let bytes: Vec<u8> = self.cells.iter().map(|&c| if c { 0 } else { 255 }).collect();
        ::image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            ::image::ExtendedColorType::L8,
        )?;
        Ok(())
    }

    /// Reads an occupancy PNG; luminance below 128 is an obstacle.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let gray = GrayImage::load_png(path)?;
        let cells = gray.values().iter().map(|&v| v < 128).collect();
        Self::from_cells(gray.width(), gray.height(), cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn connected_oracle(grid: &OccupancyGrid, a: Pixel, b: Pixel) -> bool {
        // Fixed-point relaxation over all cells, independent of the queue order.
        if grid.is_occupied(a) || grid.is_occupied(b) {
            return false;
        }
        let mut reach = vec![false; grid.width() * grid.height()];
        let idx = |p: Pixel| p.y as usize * grid.width() + p.x as usize;
        reach[idx(a)] = true;
        loop {
            let mut changed = false;
            for p in grid.pixels() {
                if reach[idx(p)] || grid.is_occupied(p) {
                    continue;
                }
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let q = Pixel::new(p.x + dx, p.y + dy);
                        if !grid.in_bounds(q) || !reach[idx(q)] {
                            continue;
                        }
                        let corner_ok = dx == 0
                            || dy == 0
                            || (grid.is_free(Pixel::new(p.x + dx, p.y))
                                && grid.is_free(Pixel::new(p.x, p.y + dy)));
                        if corner_ok {
                            reach[idx(p)] = true;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return reach[idx(b)];
            }
        }
    }

    #[test]
    fn nearest_free_returns_free_input() {
        let grid = OccupancyGrid::new(4, 4);
        assert_eq!(grid.nearest_free(Pixel::new(2, 1), 3).unwrap(), Pixel::new(2, 1));
    }

    #[test]
    fn nearest_free_finds_sole_free_neighbor() {
        let grid = OccupancyGrid::from_ascii(&["###", "##.", "###"]);
        assert_eq!(grid.nearest_free(Pixel::new(1, 1), 1).unwrap(), Pixel::new(2, 1));
    }

    #[test]
    fn nearest_free_ring_is_row_major() {
        // Two free cells on ring 1: (2,0) comes before (0,2) in row-major order.
        let grid = OccupancyGrid::from_ascii(&["##.", "###", ".##"]);
        assert_eq!(grid.nearest_free(Pixel::new(1, 1), 1).unwrap(), Pixel::new(2, 0));
        let grid = OccupancyGrid::from_ascii(&["###", "###", ".#."]);
        assert_eq!(grid.nearest_free(Pixel::new(1, 1), 1).unwrap(), Pixel::new(0, 2));
    }

    #[test]
    fn nearest_free_exhausts() {
        let grid = OccupancyGrid::from_ascii(&["###", "###", "###"]);
        assert!(matches!(
            grid.nearest_free(Pixel::new(1, 1), 5),
            Err(GridError::Exhausted { .. })
        ));
        let grid = OccupancyGrid::from_ascii(&["#####", "#####", "#####", "#####", "....#"]);
        assert!(grid.nearest_free(Pixel::new(4, 0), 3).is_err());
        assert_eq!(grid.nearest_free(Pixel::new(4, 0), 4).unwrap(), Pixel::new(0, 4));
    }

    #[test]
    fn connectivity_basic_cases() {
        let corridor = OccupancyGrid::from_ascii(&["#####", ".....", "#####"]);
        assert!(corridor.is_connected(Pixel::new(0, 1), Pixel::new(4, 1)));

        let wall = OccupancyGrid::from_ascii(&["..#..", "..#..", "..#.."]);
        assert!(!wall.is_connected(Pixel::new(0, 1), Pixel::new(4, 1)));

        let corner = OccupancyGrid::from_ascii(&[".#", "#."]);
        assert!(!corner.is_connected(Pixel::new(0, 0), Pixel::new(1, 1)));
        assert!(!connected_oracle(&corner, Pixel::new(0, 0), Pixel::new(1, 1)));

        assert!(!corridor.is_connected(Pixel::new(0, 0), Pixel::new(4, 1)));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("occ.png");
        let grid = OccupancyGrid::from_ascii(&["#..", ".#.", "..#", "###"]);
        grid.save_png(&path).unwrap();
        assert_eq!(OccupancyGrid::load_png(&path).unwrap(), grid);
    }

    proptest::proptest! {
        #[test]
        fn connectivity_matches_oracle_and_is_symmetric(
            cells in proptest::collection::vec(proptest::bool::weighted(0.35), 36),
            ax in 0i32..6, ay in 0i32..6, bx in 0i32..6, by in 0i32..6,
        ) {
            let grid = OccupancyGrid::from_cells(6, 6, cells).unwrap();
            let (a, b) = (Pixel::new(ax, ay), Pixel::new(bx, by));
            let got = grid.is_connected(a, b);
            proptest::prop_assert_eq!(got, grid.is_connected(b, a));
            proptest::prop_assert_eq!(got, connected_oracle(&grid, a, b));
        }

        #[test]
        fn nearest_free_is_free_and_deterministic(
            cells in proptest::collection::vec(proptest::bool::weighted(0.7), 49),
            x in 0i32..7, y in 0i32..7,
        ) {
            let grid = OccupancyGrid::from_cells(7, 7, cells).unwrap();
            let p = Pixel::new(x, y);
            match grid.nearest_free(p, 7) {
                Ok(q) => {
                    proptest::prop_assert!(grid.is_free(q));
                    proptest::prop_assert_eq!(grid.nearest_free(p, 7).unwrap(), q);
                    let ring = (q.x - p.x).abs().max((q.y - p.y).abs());
                    // no free cell on any smaller ring
                    for r in grid.pixels().filter(|c| grid.is_free(*c)) {
                        let d = (r.x - p.x).abs().max((r.y - p.y).abs());
                        proptest::prop_assert!(d >= ring);
                    }
                }
                Err(_) => proptest::prop_assert_eq!(grid.obstacle_count(), 49),
            }
        }
    }
}
