//! Text and PGM renderings of run artifacts, chosen by file name and content.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use adp2_core::pipeline::RunManifest;
use adp2_core::structure::pnm::{load_image, read_mask};
use adp2_core::structure::ImageBuffer;
use adp2_core::{Error, LatentTensor, Result};

enum Artifact {
    Mask { h: usize, w: usize, cells: Vec<u8> },
    Image(ImageBuffer),
    Latent(LatentTensor),
    Plan(Vec<[usize; 5]>),
    Manifest(RunManifest),
    Text(String),
}

fn load(path: &Path) -> Result<Artifact> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "pgm" | "ppm" => {
            let bytes = fs::read(path)?;
            if let Ok(m) = read_mask(&bytes[..], 0) {
                return Ok(Artifact::Mask { h: m.height, w: m.width, cells: m.grid().to_vec() });
            }
            Ok(Artifact::Image(load_image(path)?))
        }
        "ltns" => Ok(Artifact::Latent(LatentTensor::load(path)?)),
        _ if name == "manifest.txt" => {
            Ok(Artifact::Manifest(RunManifest::load(path.parent().unwrap_or(Path::new(".")))?))
        }
        _ if name == "plan.txt" => {
            let text = fs::read_to_string(path)?;
            let rows = text
                .lines()
                .map(|l| {
                    let v: Vec<usize> = l.split_whitespace().filter_map(|x| x.parse().ok()).collect();
                    v.try_into().map_err(|_| Error::Format(format!("bad plan line '{l}'")))
                })
                .collect::<Result<Vec<[usize; 5]>>>()?;
            Ok(Artifact::Plan(rows))
        }
        _ => Ok(Artifact::Text(fs::read_to_string(path)?)),
    }
}

fn coverage(rows: &[[usize; 5]]) -> (usize, usize, Vec<u32>) {
    let h = rows.iter().map(|r| r[1] + r[3]).max().unwrap_or(0);
    let w = rows.iter().map(|r| r[2] + r[4]).max().unwrap_or(0);
    let mut cov = vec![0u32; h * w];
    for r in rows {
        for y in r[1]..r[1] + r[3] {
            for x in r[2]..r[2] + r[4] {
                cov[y * w + x] += 1;
            }
        }
    }
    (h, w, cov)
}

fn grid(h: usize, w: usize, mut cell: impl FnMut(usize, usize) -> char) -> String {
    let mut s = String::with_capacity(h * (w + 1));
    for r in 0..h {
        s.extend((0..w).map(|c| cell(r, c)));
        s.push('\n');
    }
    s
}

pub fn render_text(path: &Path) -> Result<String> {
    let mut s = String::new();
    match load(path)? {
        Artifact::Mask { h, w, cells } => {
            let ones = cells.iter().filter(|&&v| v == 1).count();
            let _ = writeln!(s, "mask {h}x{w}, {ones} set ({:.4})", ones as f64 / (h * w).max(1) as f64);
            s += &grid(h, w, |r, c| if cells[r * w + c] == 1 { '#' } else { '.' });
        }
        Artifact::Image(img) if img.channels == 1 && img.data().iter().all(|&v| v == 0 || v == 255) => {
            let edges = img.data().iter().filter(|&&v| v == 255).count();
            let _ = writeln!(s, "edge map {}x{}, {edges} edge pixels", img.height, img.width);
            s += &grid(img.height, img.width, |r, c| if img.get(r, c, 0) == 255 { '#' } else { '.' });
        }
        Artifact::Image(img) => {
            let _ = writeln!(s, "image {}x{}x{}", img.height, img.width, img.channels);
            for ch in 0..img.channels {
                let vals: Vec<u8> = img.data().iter().skip(ch).step_by(img.channels).copied().collect();
                let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len().max(1) as f64;
                let (lo, hi) = (vals.iter().min().unwrap_or(&0), vals.iter().max().unwrap_or(&0));
                let _ = writeln!(s, "channel {ch}: min {lo} max {hi} mean {mean:.3}");
            }
        }
        Artifact::Latent(z) => {
            let _ = writeln!(s, "latent {}x{}x{}", z.height(), z.width(), z.channels());
            for ch in 0..z.channels() {
                let vals: Vec<f64> = z.data().iter().skip(ch).step_by(z.channels()).map(|&v| v as f64).collect();
                let n = vals.len().max(1) as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let _ = writeln!(s, "channel {ch}: min {lo:.6} max {hi:.6} mean {mean:.6} std {:.6}", var.sqrt());
            }
        }
        Artifact::Plan(rows) => {
            let (h, w, cov) = coverage(&rows);
            let max = cov.iter().copied().max().unwrap_or(0);
            let _ = writeln!(s, "plan: {} windows over {h}x{w}, max overlap {max}", rows.len());
            s += &grid(h, w, |r, c| char::from_digit(cov[r * w + c].min(9), 10).unwrap());
        }
        Artifact::Manifest(m) => {
            let _ = writeln!(s, "seed {}", m.seed);
            let _ = writeln!(s, "{} files", m.entries.len());
            let stages = m.config.scales.len();
            for k in 0..stages {
                let n = m.entries.iter().filter(|e| e.stage == Some(k)).count();
                let secs = m.stage_seconds.get(k).map_or(String::new(), |t| format!(", {t:.3}s"));
                let _ = writeln!(s, "stage {k} (scale {}): {n} files{secs}", m.config.scales[k]);
            }
            for e in &m.entries {
                let _ = writeln!(s, "  {:<12} {}", e.kind, e.path);
            }
        }
        Artifact::Text(t) => s = t,
    }
    Ok(s)
}

pub fn render_pgm(path: &Path) -> Result<ImageBuffer> {
    match load(path)? {
        Artifact::Mask { h, w, cells } => ImageBuffer::new(h, w, 1, cells.iter().map(|&v| v * 255).collect()),
        Artifact::Image(img) => Ok(img),
        Artifact::Latent(z) => {
            let ch0: Vec<f32> = z.data().iter().step_by(z.channels()).copied().collect();
            let lo = ch0.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = ch0.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let data = ch0.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect();
            ImageBuffer::new(z.height(), z.width(), 1, data)
        }
        Artifact::Plan(rows) => {
            let (h, w, cov) = coverage(&rows);
            let max = cov.iter().copied().max().unwrap_or(1).max(1);
            ImageBuffer::new(h, w, 1, cov.iter().map(|&v| (v * 255 / max) as u8).collect())
        }
        Artifact::Manifest(_) | Artifact::Text(_) => {
            Err(Error::Format(format!("{} has no image rendering", path.display())))
        }
    }
}
