//! Shifted-window patch planning, extraction and overlap-averaged fusion.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchWindow {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    pub parent_h: usize,
    pub parent_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    windows: Vec<PatchWindow>,
}

/// Window offsets along one axis; a final window flush with the far edge is
/// appended when the stride does not land on it.
fn axis_offsets(parent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = parent - patch;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if *offsets.last().unwrap() != last {
        offsets.push(last);
    }
    offsets
}

/// Plans row-major shifted windows of `patch_h x patch_w` over a `parent_h x parent_w` grid.
pub fn plan_patches(
    parent_h: usize,
    parent_w: usize,
    patch_h: usize,
    patch_w: usize,
    stride_h: usize,
    stride_w: usize,
) -> Result<PatchPlan> {
    if patch_h == 0 || patch_w == 0 || patch_h > parent_h || patch_w > parent_w {
        return Err(Error::Geometry(format!(
            "patch {patch_h}x{patch_w} must be non-empty and fit in parent {parent_h}x{parent_w}"
        )));
    }
    if stride_h == 0 || stride_w == 0 {
        return Err(Error::Geometry("strides must be >= 1".into()));
    }
    let rows = axis_offsets(parent_h, patch_h, stride_h);
    let cols = axis_offsets(parent_w, patch_w, stride_w);
    let windows = rows
        .iter()
        .flat_map(|&top| {
            cols.iter().map(move |&left| PatchWindow {
                top,
                left,
                height: patch_h,
                width: patch_w,
            })
        })
        .collect();
    Ok(PatchPlan {
        parent_h,
        parent_w,
        patch_h,
        patch_w,
        stride_h,
        stride_w,
        windows,
    })
}

impl PatchPlan {
    pub fn windows(&self) -> &[PatchWindow] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of windows covering each cell, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.parent_h * self.parent_w];
        for w in &self.windows {
            for r in w.top..w.top + w.height {
                for c in w.left..w.left + w.width {
                    counts[r * self.parent_w + c] += 1;
                }
            }
        }
        counts
    }

    /// Every coordinate multiplied by `factor` (latent grid to pixel grid).
    pub fn scaled_up(&self, factor: usize) -> PatchPlan {
        let s = |v: usize| v * factor;
        PatchPlan {
            parent_h: s(self.parent_h),
            parent_w: s(self.parent_w),
            patch_h: s(self.patch_h),
            patch_w: s(self.patch_w),
            stride_h: s(self.stride_h),
            stride_w: s(self.stride_w),
            windows: self
                .windows
                .iter()
                .map(|w| PatchWindow {
                    top: s(w.top),
                    left: s(w.left),
                    height: s(w.height),
                    width: s(w.width),
                })
                .collect(),
        }
    }

    /// Every coordinate divided by `factor`; fails unless all divide exactly.
    pub fn scaled_down(&self, factor: usize) -> Result<PatchPlan> {
        if factor == 0 {
            return Err(Error::Geometry("scale factor must be >= 1".into()));
        }
        let d = |v: usize, what: &str| {
            if v % factor == 0 {
                Ok(v / factor)
            } else {
                Err(Error::Geometry(format!(
                    "{what} {v} is not divisible by scale {factor}"
                )))
            }
        };
        let windows = self
            .windows
            .iter()
            .map(|w| {
                Ok(PatchWindow {
                    top: d(w.top, "window top")?,
                    left: d(w.left, "window left")?,
                    height: d(w.height, "window height")?,
                    width: d(w.width, "window width")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PatchPlan {
            parent_h: d(self.parent_h, "parent height")?,
            parent_w: d(self.parent_w, "parent width")?,
            patch_h: d(self.patch_h, "patch height")?,
            patch_w: d(self.patch_w, "patch width")?,
            stride_h: (self.stride_h / factor).max(1),
            stride_w: (self.stride_w / factor).max(1),
            windows,
        })
    }

    /// Diagnostic dump, one `index top left h w` line per window.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.windows.iter().enumerate() {
            let _ = writeln!(s, "{i} {} {} {} {}", w.top, w.left, w.height, w.width);
        }
        s
    }
}

pub fn extract_patch(z: &LatentTensor, w: &PatchWindow) -> Result<LatentTensor> {
    if w.top + w.height > z.height() || w.left + w.width > z.width() {
        return Err(Error::OutOfBounds(format!(
            "window ({}, {}, {}, {}) outside {}x{}",
            w.top,
            w.left,
            w.height,
            w.width,
            z.height(),
            z.width()
        )));
    }
    let c = z.channels();
    let mut data = Vec::with_capacity(w.height * w.width * c);
    for r in w.top..w.top + w.height {
        let start = z.index(r, w.left, 0);
        data.extend_from_slice(&z.data()[start..start + w.width * c]);
    }
    LatentTensor::new(w.height, w.width, c, data)
}

/// Averages overlapping patches back onto the parent grid.
pub fn fuse_patches(patches: &[LatentTensor], plan: &PatchPlan) -> Result<LatentTensor> {
    if patches.len() != plan.len() {
        return Err(Error::CountMismatch {
            expected: plan.len(),
            got: patches.len(),
        });
    }
    let channels = patches.first().map(|p| p.channels()).unwrap_or(0);
    for p in patches {
        if p.height() != plan.patch_h || p.width() != plan.patch_w || p.channels() != channels {
            return Err(Error::shape(
                format!("{}x{}x{channels}", plan.patch_h, plan.patch_w),
                p.shape(),
            ));
        }
    }
    let (ph, pw) = (plan.parent_h, plan.parent_w);
    let mut sum = vec![0.0f64; ph * pw * channels];
    let mut count = vec![0u32; ph * pw];
    for (p, w) in patches.iter().zip(plan.windows()) {
        for r in 0..w.height {
            for c in 0..w.width {
                let cell = (w.top + r) * pw + (w.left + c);
                count[cell] += 1;
                let src = p.cell(r, c);
                let dst = &mut sum[cell * channels..(cell + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s as f64;
                }
            }
        }
    }
    if let Some(cell) = count.iter().position(|&n| n == 0) {
        return Err(Error::Geometry(format!(
            "cell ({}, {}) is not covered by any window",
            cell / pw,
            cell % pw
        )));
    }
    let data = sum
        .chunks_exact(channels.max(1))
        .zip(&count)
        .flat_map(|(vals, &n)| vals.iter().map(move |v| (v / n as f64) as f32))
        .collect();
    LatentTensor::new(ph, pw, channels, data)
}
