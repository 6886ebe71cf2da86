#![allow(dead_code)]

use adp2_core::structure::{snap_magnitude, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Reference edge detector written independently of the library: full 2-D
// Gaussian stencil, slope comparisons instead of angles, and hysteresis by
// labeling weak components with union-find.

fn ref_smooth(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let g = |d: isize| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-r..=r).map(g).sum();
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let mut row = 0.0;
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    row += g(dx) / norm * src[yy * w + xx];
                }
                acc += g(dy) / norm * row;
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn reference_canny(img: &ImageBuffer, low: f64, high: f64, sigma: f64) -> Vec<bool> {
    let (h, w) = (img.height, img.width);
    let gray: Vec<f64> = (0..h * w)
        .map(|i| {
            if img.channels == 1 {
                img.data()[i] as f64
            } else {
                let p = &img.data()[i * 3..i * 3 + 3];
                0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
            }
        })
        .collect();
    let s = if sigma > 0.0 { ref_smooth(&gray, h, w, sigma) } else { gray };
    let px = |y: isize, x: isize| s[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut mag = vec![0.0; h * w];
    let mut step = vec![(0isize, 0isize); h * w];
    let t1 = (22.5f64).to_radians().tan();
    let t2 = (67.5f64).to_radians().tan();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                for b in 0..3 {
                    let v = px(y + a as isize - 1, x + b as isize - 1);
                    gx += sobel_x[a][b] * v;
                    gy += sobel_x[b][a] * v;
                }
            }
            let i = y as usize * w + x as usize;
            mag[i] = snap_magnitude((gx * gx + gy * gy).sqrt());
            // rows grow downward; ties on the bin edges are measure-zero
            step[i] = if gy.abs() <= t1 * gx.abs() {
                (0, 1)
            } else if gy.abs() >= t2 * gx.abs() {
                (1, 0)
            } else if gx * gy > 0.0 {
                (1, 1)
            } else {
                (1, -1)
            };
        }
    }
    let at = |m: &[f64], y: isize, x: isize| {
        if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
            m[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    let mut thin = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = step[i];
            let m = mag[i];
            // plateaus keep the pixel on the negative side
            if m > 0.0 && m > at(&mag, y - dy, x - dx) && m >= at(&mag, y + dy, x + dx) {
                thin[i] = m;
            }
        }
    }
    let weak: Vec<bool> = thin.iter().map(|&m| m > 0.0 && m >= low).collect();
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !weak[i] {
                continue;
            }
            for (dy, dx) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < h as isize && nx >= 0 && nx < w as isize {
                    let j = ny as usize * w + nx as usize;
                    if weak[j] {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a] = b;
                    }
                }
            }
        }
    }
    let mut strong_root = vec![false; h * w];
    for i in 0..h * w {
        if weak[i] && thin[i] >= high {
            let r = find(&mut parent, i);
            strong_root[r] = true;
        }
    }
    (0..h * w).map(|i| weak[i] && strong_root[find(&mut parent, i)]).collect()
}

pub fn square_image() -> ImageBuffer {
    ImageBuffer::from_fn(32, 32, 1, |r, c, _| if (8..24).contains(&r) && (8..24).contains(&c) { 255 } else { 0 }).unwrap()
}

/// Smooth random field plus pixel noise, so edges of every strength appear.
pub fn random_image(seed: u64, h: usize, w: usize, channels: usize) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(2.0..8.0), rng.random_range(-200.0..200.0)))
        .collect();
    let noise: Vec<f64> = (0..h * w * channels).map(|_| rng.random_range(-20.0..20.0)).collect();
    ImageBuffer::from_fn(h, w, channels, |r, c, ch| {
        let mut v = 128.0;
        for &(by, bx, rad, amp) in &blobs {
            if ((r as f64 - by).powi(2) + (c as f64 - bx).powi(2)).sqrt() < rad {
                v += amp;
            }
        }
        (v + noise[(r * w + c) * channels + ch]).round().clamp(0.0, 255.0) as u8
    })
    .unwrap()
}
