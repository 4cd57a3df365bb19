use std::collections::VecDeque;

use super::{OccupancyGrid, Pixel};

const NEIGHBORS_4: [(i32, i32); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const NEIGHBORS_8: [(i32, i32); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

/// Cleans and inflates an occupancy grid.
///
/// Stages, in order:
/// 1. drop 8-connected obstacle components with area `< cleanup`;
/// 2. fill 4-connected free components that do not touch the border and
///    have area `< cleanup`;
/// 3. when `cleanup > 0`, one 3x3 closing pass;
/// 4. dilate obstacles by the Euclidean disk of radius `inflate`.
pub fn refine(grid: &OccupancyGrid, cleanup: u32, inflate: u32) -> OccupancyGrid {
    let mut out = grid.clone();
    if cleanup > 0 {
        recolor_small_components(&mut out, true, &NEIGHBORS_8, cleanup as usize, false);
        recolor_small_components(&mut out, false, &NEIGHBORS_4, cleanup as usize, true);
        out = close_3x3(&out);
    }
    if inflate > 0 {
        out = dilate_disk(&out, inflate);
    }
    out
}

/// Flips every `value`-colored component smaller than `min_area`. With
/// `interior_only`, components touching the border are kept.
fn recolor_small_components(
    grid: &mut OccupancyGrid,
    value: bool,
    neighborhood: &[(i32, i32)],
    min_area: usize,
    interior_only: bool,
) {
    let (w, h) = (grid.width(), grid.height());
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if seen[i] || grid.cells()[i] != value {
                continue;
            }
            seen[i] = true;
            queue.push_back(Pixel::new(x as i32, y as i32));
            component.clear();
            let mut touches_border = false;
            while let Some(p) = queue.pop_front() {
                component.push(p);
                if p.x == 0 || p.y == 0 || p.x as usize == w - 1 || p.y as usize == h - 1 {
                    touches_border = true;
                }
                for &(dx, dy) in neighborhood {
                    let q = Pixel::new(p.x + dx, p.y + dy);
                    if let Some(v) = grid.get(q) {
                        let qi = q.y as usize * w + q.x as usize;
                        if v == value && !seen[qi] {
                            seen[qi] = true;
                            queue.push_back(q);
                        }
                    }
                }
            }
            if component.len() < min_area && !(interior_only && touches_border) {
                for &p in &component {
                    grid.set(p, !value);
                }
            }
        }
    }
}

/// Dilation then erosion with a 3x3 square; only in-bounds neighbors take
/// part, so closing never removes an obstacle.
fn close_3x3(grid: &OccupancyGrid) -> OccupancyGrid {
    let dilated = square_filter(grid, true);
    square_filter(&dilated, false)
}

fn square_filter(grid: &OccupancyGrid, dilate: bool) -> OccupancyGrid {
    let mut out = grid.clone();
    for p in grid.pixels() {
        let mut window = NEIGHBORS_8
            .iter()
            .chain(std::iter::once(&(0, 0)))
            .filter_map(|&(dx, dy)| grid.get(Pixel::new(p.x + dx, p.y + dy)));
        let v = if dilate {
            window.any(|v| v)
        } else {
            window.all(|v| v)
        };
        out.set(p, v);
    }
    out
}

fn dilate_disk(grid: &OccupancyGrid, radius: u32) -> OccupancyGrid {
    let r = radius as i32;
    let r2 = r * r;
    let offsets: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r2)
        .collect();
    let mut out = grid.clone();
    for p in grid.pixels().filter(|&p| grid.is_occupied(p)) {
        for &(dx, dy) in &offsets {
            let q = Pixel::new(p.x + dx, p.y + dy);
            if grid.in_bounds(q) {
                out.set(q, true);
            }
        }
    }
    out
}
