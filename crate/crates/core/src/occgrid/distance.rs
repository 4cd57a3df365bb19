use super::{OccupancyGrid, Pixel};

/// Clearance values above this many pixels are clipped.
pub const DEFAULT_CLEARANCE_CAP: f64 = 50.0;

/// Euclidean distance from each cell center to the nearest obstacle cell
/// center, clipped at `cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    cap: f64,
    dist: Vec<f64>,
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn values(&self) -> &[f64] {
        &self.dist
    }

    /// # Panics
    ///
    /// If `p` is outside the field.
    pub fn at(&self, p: Pixel) -> f64 {
        assert!(
            p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height,
            "{p} outside {}x{} distance field",
            self.width,
            self.height
        );
        self.dist[p.y as usize * self.width + p.x as usize]
    }
}

const FAR: f64 = 1e20;

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher
/// lower envelope of parabolas), run over columns then rows.
pub fn distance_field(grid: &OccupancyGrid, cap: f64) -> DistanceField {
    let (w, h) = (grid.width(), grid.height());
    let mut sq: Vec<f64> = grid.cells().iter().map(|&o| if o { 0.0 } else { FAR }).collect();

    let mut line = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    let mut scratch = Scratch::new(w.max(h));
    for x in 0..w {
        for y in 0..h {
            line[y] = sq[y * w + x];
        }
        transform_1d(&line[..h], &mut out[..h], &mut scratch);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        transform_1d(&line[..w], &mut out[..w], &mut scratch);
        sq[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }

    let dist = sq
        .into_iter()
        .map(|d| if d >= FAR { cap } else { d.sqrt().min(cap) })
        .collect();
    DistanceField {
        width: w,
        height: h,
        cap,
        dist,
    }
}

struct Scratch {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            vertices: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }
}

fn transform_1d(f: &[f64], d: &mut [f64], s: &mut Scratch) {
    let n = f.len();
    // Cells still at FAR carry no parabola; skip them so the envelope stays exact.
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] >= FAR {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                s.vertices[0] = q;
                s.bounds[0] = f64::NEG_INFINITY;
                s.bounds[1] = f64::INFINITY;
                break;
            }
            let v = s.vertices[k as usize];
            let qf = q as f64;
            let vf = v as f64;
            let inter = ((f[q] + qf * qf) - (f[v] + vf * vf)) / (2.0 * (qf - vf));
            if inter <= s.bounds[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            s.vertices[k as usize] = q;
            s.bounds[k as usize] = inter;
            s.bounds[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        d.fill(FAR);
        return;
    }
    let mut j = 0usize;
    for (q, slot) in d.iter_mut().enumerate() {
        while s.bounds[j + 1] < q as f64 {
            j += 1;
        }
        let v = s.vertices[j];
        let diff = q as f64 - v as f64;
        *slot = diff * diff + f[v];
    }
}
