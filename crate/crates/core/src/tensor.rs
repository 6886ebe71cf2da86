//! Latent tensors, noise schedules and the deterministic denoising update.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const LTNS_MAGIC: &[u8; 4] = b"LTNS";

/// Height, width and channel count of a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// Row-major `h x w x c` latent with the channel index innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(height, width, channels);
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                format!("{} values", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value at index {i}")));
        }
        Ok(LatentTensor { shape, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        let shape = Shape::new(height, width, channels);
        LatentTensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let shape = Shape::new(height, width, channels);
        let mut data = Vec::with_capacity(shape.len());
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        LatentTensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.shape.width + col) * self.shape.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    /// The `channels` values stored at one spatial cell.
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.shape.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = self.index(row, col, 0);
        let c = self.shape.channels;
        &mut self.data[start..start + c]
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max))
    }

    pub fn to_ltns_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        self.write_ltns(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_ltns<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(LTNS_MAGIC)?;
        for dim in [self.shape.height, self.shape.width, self.shape.channels] {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
            w.write_all(&dim.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * self.data.len());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ltns<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LTNS_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Format("tensor dimensions overflow".into()))?;
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        LatentTensor::new(dims[0], dims[1], dims[2], data)
    }

    pub fn from_ltns_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_ltns(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor",
                cursor.len()
            )));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ltns(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_ltns(std::io::BufReader::new(f))
    }
}

/// Cumulative signal levels `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Accepts any non-increasing table in `(0, 1]` starting at 1.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidRange(format!(
                "alpha_bar[0] must be 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1] <= w[0]) {
                return Err(Error::InvalidRange(format!(
                    "alpha_bar[{}] = {} breaks monotonicity or (0,1] bound",
                    t + 1,
                    w[1]
                )));
            }
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::StepOutOfRange(format!("t={t} > T={}", self.steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Evenly spaced inference timesteps `tau_1 < ... < tau_n` on the training grid,
    /// with `tau_n = T`. Returned in descending order, the order they are visited.
    pub fn inference_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if n == 0 || n > big_t {
            return Err(Error::InvalidRange(format!(
                "inference steps {n} must be in 1..={big_t}"
            )));
        }
        Ok((1..=n).rev().map(|i| i * big_t / n).collect())
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps`, accumulated into `alpha_bar`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidRange("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0f64;
    for i in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    z0.ensure_same_shape(eps)?;
    if t < 1 || t > sched.steps() {
        return Err(Error::StepOutOfRange(format!(
            "t={t} not in 1..={}",
            sched.steps()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    Ok(LatentTensor {
        shape: z0.shape(),
        data,
    })
}

/// Coefficients `(on_latent, on_noise)` of the deterministic update between two
/// cumulative signal levels.
pub fn ddim_coefficients(alpha_bar_t: f64, alpha_bar_prev: f64) -> (f64, f64) {
    let ratio = (alpha_bar_prev / alpha_bar_t).sqrt();
    let noise = (1.0 - alpha_bar_prev).sqrt() - ratio * (1.0 - alpha_bar_t).sqrt();
    (ratio, noise)
}

/// The deterministic update expressed directly in signal levels.
pub fn ddim_update(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
) -> Result<LatentTensor> {
    z_t.ensure_same_shape(eps_pred)?;
    let (a, b) = ddim_coefficients(alpha_bar_t, alpha_bar_prev);
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect();
    Ok(LatentTensor {
        shape: z_t.shape(),
        data,
    })
}

pub fn ddim_step(
    z_t: &LatentTensor,
    eps_pred: &LatentTensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    z_t.ensure_same_shape(eps_pred)?;
    if t_prev >= t {
        return Err(Error::StepOrder { t, t_prev });
    }
    if t > sched.steps() {
        return Err(Error::StepOutOfRange(format!(
            "t={t} > T={}",
            sched.steps()
        )));
    }
    ddim_update(z_t, eps_pred, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?)
}

/// Cubic convolution kernel with `a = -0.75`.
pub(crate) fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate of a half-pixel-centred
/// bicubic resize; edge taps are clamped.
pub(crate) fn bicubic_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = (o as f64 + 0.5) * scale - 0.5;
            let x0 = x.floor();
            let frac = x - x0;
            let mut idx = [0usize; 4];
            let mut w = [0.0f64; 4];
            for k in 0..4 {
                let i = x0 as i64 - 1 + k as i64;
                idx[k] = i.clamp(0, src as i64 - 1) as usize;
                w[k] = cubic_weight(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resize of an interleaved `h x w x c` buffer, in f64.
pub(crate) fn bicubic_resize(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    new_h: usize,
    new_w: usize,
) -> Vec<f64> {
    let col_taps = bicubic_taps(w, new_w);
    let mut rows = vec![0.0f64; h * new_w * c];
    for r in 0..h {
        for (o, (idx, wt)) in col_taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * src[(r * w + idx[k]) * c + ch];
                }
                rows[(r * new_w + o) * c + ch] = acc;
            }
        }
    }
    let row_taps = bicubic_taps(h, new_h);
    let mut out = vec![0.0f64; new_h * new_w * c];
    for (o, (idx, wt)) in row_taps.iter().enumerate() {
        for col in 0..new_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * rows[(idx[k] * new_w + col) * c + ch];
                }
                out[(o * new_w + col) * c + ch] = acc;
            }
        }
    }
    out
}

/// Bicubic per-channel upscaling. Equal dimensions return an exact copy.
pub fn interpolate_latent(z: &LatentTensor, new_h: usize, new_w: usize) -> Result<LatentTensor> {
    if new_h < z.height() || new_w < z.width() {
        return Err(Error::Downscale {
            from: format!("{}x{}", z.height(), z.width()),
            to: format!("{new_h}x{new_w}"),
        });
    }
    if new_h == z.height() && new_w == z.width() {
        return Ok(z.clone());
    }
    let src: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
    let out = bicubic_resize(&src, z.height(), z.width(), z.channels(), new_h, new_w);
    Ok(LatentTensor {
        shape: Shape::new(new_h, new_w, z.channels()),
        data: out.into_iter().map(|v| v as f32).collect(),
    })
}

/// Elementwise `(1 - w) * a + w * b`.
pub fn lerp(a: &LatentTensor, b: &LatentTensor, w: f64) -> Result<LatentTensor> {
    a.ensure_same_shape(b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((1.0 - w) * x as f64 + w * y as f64) as f32)
        .collect();
    Ok(LatentTensor {
        shape: a.shape(),
        data,
    })
}
