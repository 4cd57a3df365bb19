use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GridError, OccupancyGrid};

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(GridError::BufferSize {
                width,
                height,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    /// Loads any 8-bit PNG (gray, gray+alpha, RGB, RGBA); alpha is dropped.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let rgb = ::image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.pixels().map(|p| p.0).collect();
        Self::new(w as usize, h as usize, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        ::image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            ::image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }
}

/// 8-bit luminance raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyImage);
        }
        if values.len() != width * height {
            return Err(GridError::BufferSize {
                width,
                height,
                actual: values.len(),
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Intensity inversion `255 - Y`.
    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| 255 - v).collect(),
        }
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut hist = [0u64; 256];
        for &v in &self.values {
            hist[v as usize] += 1;
        }
        hist
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let luma = ::image::open(path)?.to_luma8();
        let (w, h) = luma.dimensions();
        Self::new(w as usize, h as usize, luma.into_raw())
    }
}

/// Which intensity class is read as obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// `Y <= T` is an obstacle.
    Dark,
    /// `Y > T` is an obstacle.
    Light,
}

impl Polarity {
    pub fn opposite(self) -> Self {
        match self {
            Polarity::Dark => Polarity::Light,
            Polarity::Light => Polarity::Dark,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Dark => "dark",
            Polarity::Light => "light",
        })
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dark" => Ok(Polarity::Dark),
            "light" => Ok(Polarity::Light),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

/// Rec. 709 luma `0.2126 R + 0.7152 G + 0.0722 B`, rounded half up.
///
/// Evaluated in fixed point (weights scaled by 10^4) so rounding ties are
/// exact.
pub fn to_grayscale(img: &ColorImage) -> GrayImage {
    let values = img
        .pixels
        .iter()
        .map(|&[r, g, b]| {
            let scaled = 2126 * u32::from(r) + 7152 * u32::from(g) + 722 * u32::from(b);
            ((scaled + 5000) / 10000).min(255) as u8
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        values,
    }
}

/// Otsu threshold over the 256-bin histogram.
///
/// Classes are `[0..=T]` and `[T+1..=255]`; the smallest `T` wins ties. A
/// single-valued image returns that value.
pub fn otsu_threshold(img: &GrayImage) -> u8 {
    otsu_from_histogram(&img.histogram())
}

pub(crate) fn otsu_from_histogram(hist: &[u64; 256]) -> u8 {
    let occupied: Vec<usize> = (0..256).filter(|&v| hist[v] > 0).collect();
    if occupied.len() == 1 {
        return occupied[0] as u8;
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();

    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (t, &count) in hist.iter().enumerate() {
        n0 += count;
        s0 += t as u64 * count;
        let n1 = total - n0;
        let variance = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            // n0 n1 (m0 - m1)^2 / N^2 with the common 1/N^2 dropped:
            // (s0 n1 - s1 n0)^2 / (n0 n1)
            let s1 = total_sum - s0;
            let d = (i128::from(s0) * i128::from(n1) - i128::from(s1) * i128::from(n0)) as f64;
            d * d / (n0 as f64 * n1 as f64)
        };
        if variance > best {
            best = variance;
            best_t = t as u8;
        }
    }
    best_t
}

pub fn binarize(img: &GrayImage, threshold: u8, polarity: Polarity) -> OccupancyGrid {
    let cells = img
        .values
        .iter()
        .map(|&v| match polarity {
            Polarity::Dark => v <= threshold,
            Polarity::Light => v > threshold,
        })
        .collect();
    OccupancyGrid::from_cells(img.width, img.height, cells).expect("gray image is non-empty")
}
