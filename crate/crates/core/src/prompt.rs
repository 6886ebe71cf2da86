//! Patch-content-aware prompts derived from low-resolution cross-attention.
//!
//! Each word's attention column is binarized against its own mean, reshaped to
//! the attention grid, cleaned with a morphological opening, upscaled to the
//! stage's attention grid and cropped per patch window. A word joins a patch's
//! prompt when its mask density inside the window exceeds `c`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::patch::PatchPlan;
use crate::tensor::LatentTensor;

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_RADIUS: usize = 1;

/// `N x M` attention scores, `N = map_h * map_w` latent cells by `M` words.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMap {
    map_h: usize,
    map_w: usize,
    words: usize,
    values: Vec<f32>,
}

impl CrossAttentionMap {
    pub fn new(map_h: usize, map_w: usize, words: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != map_h * map_w * words {
            return Err(Error::shape(
                format!("{} scores for {map_h}x{map_w} cells by {words} words", map_h * map_w * words),
                format!("{} scores", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Format(format!("attention score {v} is not a finite nonnegative value")));
        }
        Ok(CrossAttentionMap { map_h, map_w, words, values })
    }

    pub fn map_h(&self) -> usize {
        self.map_h
    }

    pub fn map_w(&self) -> usize {
        self.map_w
    }

    /// Number of cells `N`.
    pub fn rows(&self) -> usize {
        self.map_h * self.map_w
    }

    /// Number of words `M`.
    pub fn cols(&self) -> usize {
        self.words
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, cell: usize, word: usize) -> f32 {
        self.values[cell * self.words + word]
    }

    pub fn column(&self, word: usize) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().skip(word).step_by(self.words.max(1)).copied()
    }

    /// Down-sampling factor between a latent of height `latent_h` and this map.
    pub fn scale_for(&self, latent_h: usize, latent_w: usize) -> Result<usize> {
        if self.map_h == 0 || latent_h % self.map_h != 0 || latent_w % self.map_w != 0 {
            return Err(Error::Geometry(format!(
                "attention grid {}x{} does not divide latent {latent_h}x{latent_w}",
                self.map_h, self.map_w
            )));
        }
        let (sh, sw) = (latent_h / self.map_h, latent_w / self.map_w);
        if sh != sw {
            return Err(Error::Geometry(format!("anisotropic attention scale {sh}x{sw}")));
        }
        Ok(sh)
    }

    /// Stored in the tensor container with words as channels.
    pub fn to_tensor(&self) -> LatentTensor {
        LatentTensor::new(self.map_h, self.map_w, self.words, self.values.clone())
            .expect("validated on construction")
    }

    pub fn from_tensor(t: &LatentTensor) -> Result<Self> {
        Self::new(t.height(), t.width(), t.channels(), t.data().to_vec())
    }

    /// Nearest-neighbour resample onto another grid.
    pub fn resample(&self, new_h: usize, new_w: usize) -> CrossAttentionMap {
        let mut values = Vec::with_capacity(new_h * new_w * self.words);
        for r in 0..new_h {
            let sr = nearest(r, self.map_h, new_h);
            for c in 0..new_w {
                let sc = nearest(c, self.map_w, new_w);
                let cell = sr * self.map_w + sc;
                values.extend_from_slice(&self.values[cell * self.words..(cell + 1) * self.words]);
            }
        }
        CrossAttentionMap { map_h: new_h, map_w: new_w, words: self.words, values }
    }
}

/// Source index whose cell centre is nearest to the centre of output cell `o`.
fn nearest(o: usize, src: usize, dst: usize) -> usize {
    ((2 * o + 1) * src / (2 * dst)).min(src - 1)
}

/// Mean of several maps after nearest-neighbour resampling onto the coarsest grid.
pub fn mean_combine(maps: &[CrossAttentionMap]) -> Result<CrossAttentionMap> {
    let first = maps.first().ok_or(Error::EmptyMap)?;
    let words = first.words;
    if let Some(m) = maps.iter().find(|m| m.words != words) {
        return Err(Error::CountMismatch { expected: words, got: m.words });
    }
    let target = maps
        .iter()
        .min_by_key(|m| m.rows())
        .map(|m| (m.map_h, m.map_w))
        .unwrap();
    let mut acc = vec![0.0f64; target.0 * target.1 * words];
    for m in maps {
        let r = if (m.map_h, m.map_w) == target { m.clone() } else { m.resample(target.0, target.1) };
        for (a, v) in acc.iter_mut().zip(&r.values) {
            *a += *v as f64;
        }
    }
    let n = maps.len() as f64;
    CrossAttentionMap::new(target.0, target.1, words, acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Binary mask on a 2-D grid for one word position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordMask {
    pub height: usize,
    pub width: usize,
    pub word_index: usize,
    grid: Vec<u8>,
}

impl WordMask {
    pub fn new(height: usize, width: usize, word_index: usize, grid: Vec<u8>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} mask"), format!("{} cells", grid.len())));
        }
        if grid.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(WordMask { height, width, word_index, grid })
    }

    pub fn from_fn(height: usize, width: usize, word_index: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let grid = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        WordMask { height, width, word_index, grid }
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.grid[row * self.width + col] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 1).count()
    }

    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / (self.height * self.width) as f64
    }

    fn with_grid(&self, grid: Vec<u8>) -> WordMask {
        WordMask { grid, ..*self }
    }
}

/// One mask per word: a cell is set when its score is strictly above the column mean.
pub fn binarize_attention(att: &CrossAttentionMap) -> Result<Vec<WordMask>> {
    if att.rows() == 0 || att.cols() == 0 {
        return Err(Error::EmptyMap);
    }
    let n = att.rows();
    Ok((0..att.cols())
        .map(|j| {
            let mean = att.column(j).map(|v| v as f64).sum::<f64>() / n as f64;
            let grid = att.column(j).map(|v| ((v as f64) > mean) as u8).collect();
            WordMask { height: att.map_h, width: att.map_w, word_index: j, grid }
        })
        .collect())
}

/// Square-element erosion; cells outside the grid count as 0.
fn erode(m: &WordMask, radius: usize) -> Vec<u8> {
    let (h, w) = (m.height as isize, m.width as isize);
    let r = radius as isize;
    let mut out = vec![0u8; m.grid.len()];
    for row in 0..h {
        for col in 0..w {
            let mut all = true;
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    let (y, x) = (row + dr, col + dc);
                    if y < 0 || x < 0 || y >= h || x >= w || m.grid[(y * w + x) as usize] == 0 {
                        all = false;
                        break 'scan;
                    }
                }
            }
            out[(row * w + col) as usize] = all as u8;
        }
    }
    out
}

fn dilate(m: &WordMask, radius: usize) -> Vec<u8> {
    let (h, w) = (m.height as isize, m.width as isize);
    let r = radius as isize;
    let mut out = vec![0u8; m.grid.len()];
    for row in 0..h {
        for col in 0..w {
            if m.grid[(row * w + col) as usize] == 0 {
                continue;
            }
            for y in (row - r).max(0)..=(row + r).min(h - 1) {
                for x in (col - r).max(0)..=(col + r).min(w - 1) {
                    out[(y * w + x) as usize] = 1;
                }
            }
        }
    }
    out
}

/// Morphological opening (erosion then dilation) with a `(2r+1)^2` square element.
pub fn open_mask(m: &WordMask, radius: usize) -> WordMask {
    if radius == 0 {
        return m.clone();
    }
    let eroded = m.with_grid(erode(m, radius));
    m.with_grid(dilate(&eroded, radius))
}

/// Nearest-neighbour upscaling of a mask.
pub fn upscale_mask(m: &WordMask, new_h: usize, new_w: usize) -> Result<WordMask> {
    if new_h < m.height || new_w < m.width {
        return Err(Error::Downscale {
            from: format!("{}x{}", m.height, m.width),
            to: format!("{new_h}x{new_w}"),
        });
    }
    let mut grid = Vec::with_capacity(new_h * new_w);
    for r in 0..new_h {
        let sr = nearest(r, m.height, new_h);
        for c in 0..new_w {
            grid.push(m.grid[sr * m.width + nearest(c, m.width, new_w)]);
        }
    }
    Ok(WordMask { height: new_h, width: new_w, word_index: m.word_index, grid })
}

/// Per-patch word selections against a source prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPromptSet {
    /// Word positions selected for each patch, ascending.
    pub selections: Vec<Vec<usize>>,
    /// The full prompt as token ids.
    pub tokens: Vec<u32>,
}

impl PatchPromptSet {
    /// Every patch receives the whole prompt.
    pub fn full(patches: usize, tokens: Vec<u32>) -> Self {
        let all: Vec<usize> = (0..tokens.len()).collect();
        PatchPromptSet { selections: vec![all; patches], tokens }
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    /// Token ids for patch `i`, falling back to the full prompt when nothing was selected.
    pub fn tokens_for(&self, i: usize) -> Vec<u32> {
        let sel = &self.selections[i];
        if sel.is_empty() {
            log::debug!("patch {i}: no word passed the threshold, using the full prompt");
            return self.tokens.clone();
        }
        sel.iter().map(|&j| self.tokens[j]).collect()
    }

    /// Patches whose selection was empty and will fall back to the full prompt.
    pub fn fallback_patches(&self) -> Vec<usize> {
        (0..self.selections.len()).filter(|&i| self.selections[i].is_empty()).collect()
    }

    /// Text dump, one `patch_index: word_index...` line per patch.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, sel) in self.selections.iter().enumerate() {
            let _ = write!(s, "{i}:");
            for j in sel {
                let _ = write!(s, " {j}");
            }
            s.push('\n');
        }
        s
    }
}

/// Selects word `j` for patch `i` iff the fraction of set cells of mask `j`
/// inside window `i` is strictly greater than `c`.
pub fn derive_patch_prompts(
    masks: &[WordMask],
    plan: &PatchPlan,
    c: f64,
    tokens: &[u32],
) -> Result<PatchPromptSet> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidRange(format!("c must be in (0,1), got {c}")));
    }
    if masks.len() != tokens.len() {
        return Err(Error::CountMismatch { expected: tokens.len(), got: masks.len() });
    }
    for m in masks {
        if m.height != plan.parent_h || m.width != plan.parent_w {
            return Err(Error::Geometry(format!(
                "mask {}x{} does not match plan grid {}x{}",
                m.height, m.width, plan.parent_h, plan.parent_w
            )));
        }
        if m.word_index >= tokens.len() {
            return Err(Error::Geometry(format!("word index {} out of range", m.word_index)));
        }
    }
    let area = (plan.patch_h * plan.patch_w) as f64;
    let selections = plan
        .windows()
        .iter()
        .map(|w| {
            let mut sel: Vec<usize> = masks
                .iter()
                .filter(|m| {
                    let ones: usize = (w.top..w.top + w.height)
                        .map(|r| {
                            let row = &m.grid[r * m.width + w.left..r * m.width + w.left + w.width];
                            row.iter().filter(|&&v| v == 1).count()
                        })
                        .sum();
                    ones as f64 / area > c
                })
                .map(|m| m.word_index)
                .collect();
            sel.sort_unstable();
            sel.dedup();
            sel
        })
        .collect();
    Ok(PatchPromptSet { selections, tokens: tokens.to_vec() })
}
