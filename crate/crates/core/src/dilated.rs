//! Global branch: strided sub-grid sampling, per-position window interaction
//! and the cosine-scheduled blend with the patch branch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::LatentTensor;

/// Strides relating a high-resolution latent to the base resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilationPlan {
    pub low_h: usize,
    pub low_w: usize,
    pub high_h: usize,
    pub high_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl DilationPlan {
    pub fn new(low_h: usize, low_w: usize, high_h: usize, high_w: usize) -> Result<Self> {
        if low_h == 0 || low_w == 0 || high_h % low_h != 0 || high_w % low_w != 0 {
            return Err(Error::Indivisible(format!(
                "{high_h}x{high_w} is not an integer multiple of {low_h}x{low_w}"
            )));
        }
        Ok(DilationPlan {
            low_h,
            low_w,
            high_h,
            high_w,
            stride_h: high_h / low_h,
            stride_w: high_w / low_w,
        })
    }

    /// Number of samples `P2`.
    pub fn samples(&self) -> usize {
        self.stride_h * self.stride_w
    }
}

/// Sample `k = i * stride_w + j` (0-based) holds `Z[i::stride_h, j::stride_w, :]`.
pub fn dilate_extract(z: &LatentTensor, plan: &DilationPlan) -> Result<Vec<LatentTensor>> {
    if z.height() != plan.high_h || z.width() != plan.high_w {
        return Err(Error::Indivisible(format!(
            "latent {}x{} does not match dilation plan {}x{}",
            z.height(),
            z.width(),
            plan.high_h,
            plan.high_w
        )));
    }
    let ch = z.channels();
    let mut out = Vec::with_capacity(plan.samples());
    for i in 0..plan.stride_h {
        for j in 0..plan.stride_w {
            let mut data = Vec::with_capacity(plan.low_h * plan.low_w * ch);
            for r in 0..plan.low_h {
                for c in 0..plan.low_w {
                    data.extend_from_slice(z.cell(i + r * plan.stride_h, j + c * plan.stride_w));
                }
            }
            out.push(LatentTensor::new(plan.low_h, plan.low_w, ch, data)?);
        }
    }
    Ok(out)
}

/// Interleaves samples back into the high-resolution grid; inverse of [`dilate_extract`].
pub fn dilate_recombine(samples: &[LatentTensor], plan: &DilationPlan) -> Result<LatentTensor> {
    if samples.len() != plan.samples() {
        return Err(Error::CountMismatch { expected: plan.samples(), got: samples.len() });
    }
    let ch = samples[0].channels();
    for s in samples {
        if s.height() != plan.low_h || s.width() != plan.low_w || s.channels() != ch {
            return Err(Error::shape(format!("{}x{}x{ch}", plan.low_h, plan.low_w), s.shape()));
        }
    }
    let mut out = LatentTensor::zeros(plan.high_h, plan.high_w, ch);
    for (k, s) in samples.iter().enumerate() {
        let (i, j) = (k / plan.stride_w, k % plan.stride_w);
        for r in 0..plan.low_h {
            for c in 0..plan.low_w {
                out.cell_mut(i + r * plan.stride_h, j + c * plan.stride_w)
                    .copy_from_slice(s.cell(r, c));
            }
        }
    }
    Ok(out)
}

/// Per-position permutations of the sample index for one timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPermutations {
    samples: usize,
    forward: Vec<u32>,
    inverse: Vec<u32>,
}

impl StepPermutations {
    fn identity(positions: usize, samples: usize) -> Self {
        let row: Vec<u32> = (0..samples as u32).collect();
        let forward: Vec<u32> = row.iter().copied().cycle().take(positions * samples).collect();
        StepPermutations { samples, inverse: forward.clone(), forward }
    }

    fn from_forward(samples: usize, forward: Vec<u32>) -> Self {
        let mut inverse = vec![0u32; forward.len()];
        for (pos, perm) in forward.chunks_exact(samples).enumerate() {
            for (k, &f) in perm.iter().enumerate() {
                inverse[pos * samples + f as usize] = k as u32;
            }
        }
        StepPermutations { samples, forward, inverse }
    }

    pub fn forward(&self, position: usize) -> &[u32] {
        &self.forward[position * self.samples..(position + 1) * self.samples]
    }

    pub fn inverse(&self, position: usize) -> &[u32] {
        &self.inverse[position * self.samples..(position + 1) * self.samples]
    }
}

/// Seeded per-(position, timestep) permutations of the dilation samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowBijection {
    pub seed: u64,
    pub low_h: usize,
    pub low_w: usize,
    pub samples: usize,
    tables: BTreeMap<usize, StepPermutations>,
}

impl WindowBijection {
    pub fn identity(low_h: usize, low_w: usize, samples: usize, steps: &[usize]) -> Self {
        let tables = steps
            .iter()
            .map(|&t| (t, StepPermutations::identity(low_h * low_w, samples)))
            .collect();
        WindowBijection { seed: 0, low_h, low_w, samples, tables }
    }

    /// One independent uniform permutation per position and timestep; the
    /// table for step `t` depends only on `(seed, t)`.
    pub fn random(seed: u64, low_h: usize, low_w: usize, samples: usize, steps: &[usize]) -> Self {
        let tables = steps
            .iter()
            .map(|&t| {
                let mut rng = rng_for(seed, t as u64);
                let mut forward = Vec::with_capacity(low_h * low_w * samples);
                let mut perm: Vec<u32> = (0..samples as u32).collect();
                for _ in 0..low_h * low_w {
                    perm.shuffle(&mut rng);
                    forward.extend_from_slice(&perm);
                }
                (t, StepPermutations::from_forward(samples, forward))
            })
            .collect();
        WindowBijection { seed, low_h, low_w, samples, tables }
    }

    /// Builds from explicit forward tables; each row must be a permutation.
    pub fn from_tables(
        low_h: usize,
        low_w: usize,
        samples: usize,
        tables: impl IntoIterator<Item = (usize, Vec<u32>)>,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (t, forward) in tables {
            if forward.len() != low_h * low_w * samples {
                return Err(Error::CountMismatch { expected: low_h * low_w * samples, got: forward.len() });
            }
            for row in forward.chunks_exact(samples) {
                let mut seen = vec![false; samples];
                for &k in row {
                    let k = k as usize;
                    if k >= samples || std::mem::replace(&mut seen[k], true) {
                        return Err(Error::Format(format!("timestep {t}: row {row:?} is not a permutation")));
                    }
                }
            }
            out.insert(t, StepPermutations::from_forward(samples, forward));
        }
        Ok(WindowBijection { seed: 0, low_h, low_w, samples, tables: out })
    }

    pub fn step(&self, t: usize) -> Result<&StepPermutations> {
        self.tables.get(&t).ok_or(Error::MissingPermutation(t))
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.tables.keys().copied()
    }

    /// Per timestep a `t <step>` header, then one line per position with the
    /// forward permutation as whitespace-separated 1-based indices.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (t, table) in self.tables.iter().rev() {
            let _ = writeln!(s, "t {t}");
            for pos in 0..self.low_h * self.low_w {
                let row: Vec<String> = table.forward(pos).iter().map(|k| (k + 1).to_string()).collect();
                let _ = writeln!(s, "{} {} {}", pos / self.low_w, pos % self.low_w, row.join(" "));
            }
        }
        s
    }
}

/// Moves values between samples per position. Forward: output sample `k` takes
/// the value of input sample `f(k)`; inverse uses `f^-1`.
pub fn shuffle_windows(
    samples: &[LatentTensor],
    bij: &WindowBijection,
    t: usize,
    inverse: bool,
) -> Result<Vec<LatentTensor>> {
    let table = bij.step(t)?;
    if samples.len() != bij.samples {
        return Err(Error::CountMismatch { expected: bij.samples, got: samples.len() });
    }
    for s in samples {
        if s.height() != bij.low_h || s.width() != bij.low_w || s.shape() != samples[0].shape() {
            return Err(Error::shape(format!("{}x{}", bij.low_h, bij.low_w), s.shape()));
        }
    }
    let mut out: Vec<LatentTensor> = samples.to_vec();
    for r in 0..bij.low_h {
        for c in 0..bij.low_w {
            let pos = r * bij.low_w + c;
            let perm = if inverse { table.inverse(pos) } else { table.forward(pos) };
            for (k, &src) in perm.iter().enumerate() {
                out[k].cell_mut(r, c).copy_from_slice(samples[src as usize].cell(r, c));
            }
        }
    }
    Ok(out)
}

/// Cosine weight falling from 1 at `t = T` to 0 at `t = 0`.
pub fn eta_schedule(t: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = t.min(total);
    (1.0 + (std::f64::consts::PI * (total - t) as f64 / total as f64).cos()) / 2.0
}

/// `(1 - eta) * patch + eta * global`.
pub fn blend_global(patch: &LatentTensor, global: &LatentTensor, eta: f64) -> Result<LatentTensor> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidRange(format!("eta must be in [0,1], got {eta}")));
    }
    patch.ensure_same_shape(global)?;
    if eta == 0.0 {
        return Ok(patch.clone());
    }
    if eta == 1.0 {
        return Ok(global.clone());
    }
    crate::tensor::lerp(patch, global, eta)
}
