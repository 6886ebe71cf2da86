//! Canny edge detection: Gaussian smoothing, Sobel gradients, non-maximum
//! suppression on four direction bins, and 8-connected hysteresis.

use std::collections::VecDeque;

use super::image::{EdgeMap, ImageBuffer};
use crate::error::{Error, Result};

pub const DEFAULT_LOW: f64 = 100.0;
pub const DEFAULT_HIGH: f64 = 200.0;
pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CannyParams {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams { low: DEFAULT_LOW, high: DEFAULT_HIGH, sigma: DEFAULT_SIGMA }
    }
}

/// Normalized 1-D Gaussian taps covering `ceil(3 * sigma)` on each side.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Gradient magnitudes are kept on a fixed grid so that mathematically equal
/// neighbours compare as equal during suppression.
pub fn snap_magnitude(m: f64) -> f64 {
    (m * 1e6).round() / 1e6
}

fn smooth(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Direction {
    Horizontal,
    Diagonal,
    Vertical,
    AntiDiagonal,
}

impl Direction {
    /// Quantizes the gradient angle into one of four bins. Rows grow downward.
    fn of(gx: f64, gy: f64) -> Direction {
        let mut deg = gy.atan2(gx).to_degrees();
        if deg < 0.0 {
            deg += 180.0;
        }
        if !(22.5..157.5).contains(&deg) {
            Direction::Horizontal
        } else if deg < 67.5 {
            Direction::Diagonal
        } else if deg < 112.5 {
            Direction::Vertical
        } else {
            Direction::AntiDiagonal
        }
    }

    /// Offsets `(dy, dx)` of the neighbour along the positive gradient direction.
    fn step(self) -> (isize, isize) {
        match self {
            Direction::Horizontal => (0, 1),
            Direction::Diagonal => (1, 1),
            Direction::Vertical => (1, 0),
            Direction::AntiDiagonal => (1, -1),
        }
    }
}

/// Gradient magnitude and quantized direction after smoothing.
fn gradients(img: &ImageBuffer, sigma: f64) -> (Vec<f64>, Vec<Direction>) {
    let (h, w) = (img.height, img.width);
    let s = smooth(&img.luma(), h, w, sigma);
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        s[y * w + x]
    };
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![Direction::Horizontal; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = snap_magnitude(gx.hypot(gy));
            dir[i] = Direction::of(gx, gy);
        }
    }
    (mag, dir)
}

/// A pixel survives when strictly above its neighbour against the gradient and
/// at least equal to the one along it, so plateaus of width two keep one pixel.
fn suppress(mag: &[f64], dir: &[Direction], h: usize, w: usize) -> Vec<f64> {
    let get = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = dir[i].step();
            let (yi, xi) = (y as isize, x as isize);
            let ahead = get(yi + dy, xi + dx);
            let behind = get(yi - dy, xi - dx);
            if m > behind && m >= ahead {
                out[i] = m;
            }
        }
    }
    out
}

fn hysteresis(thin: &[f64], h: usize, w: usize, low: f64, high: f64) -> Vec<bool> {
    let mut edge = vec![false; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0.0 && m >= high {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] > 0.0 && thin[j] >= low {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edge
}

/// Edge map of `img`; 3-channel input is converted to luma first.
pub fn canny_edges(img: &ImageBuffer, low: f64, high: f64, sigma: f64) -> Result<EdgeMap> {
    if !(0.0 <= low && low <= high && high <= 255.0) || !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidThreshold(format!(
            "need 0 <= low <= high <= 255 and sigma >= 0, got low={low}, high={high}, sigma={sigma}"
        )));
    }
    let (h, w) = (img.height, img.width);
    if h == 0 || w == 0 {
        return EdgeMap::new(h, w, Vec::new());
    }
    let (mag, dir) = gradients(img, sigma);
    let thin = suppress(&mag, &dir, h, w);
    let edges = hysteresis(&thin, h, w, low, high);
    Ok(EdgeMap::from_fn(h, w, |y, x| edges[y * w + x]))
}

pub fn canny_with(img: &ImageBuffer, p: &CannyParams) -> Result<EdgeMap> {
    canny_edges(img, p.low, p.high, p.sigma)
}
