use crate::error::{Error, Result};
use crate::tensor::{bicubic_resize, LatentTensor};

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Format(format!("image must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!("{height}x{width}x{channels} image"), format!("{} bytes", data.len())));
        }
        Ok(ImageBuffer { height, width, channels, data })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Luma (BT.601 weights) per pixel, as floating point.
    pub fn luma(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as f64).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Float tensor with one channel per image channel, values in 0..=255.
    pub fn to_tensor(&self) -> LatentTensor {
        LatentTensor::new(self.height, self.width, self.channels, self.data.iter().map(|&v| v as f32).collect())
            .expect("image dims are consistent")
    }

    pub fn from_tensor(t: &LatentTensor) -> Result<Self> {
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Format(format!("pixel value {v} is not an integer in 0..=255")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(t.height(), t.width(), t.channels(), data)
    }
}

/// Bicubic upscaling with rounding and clamping to `0..=255`.
pub fn upscale_image(img: &ImageBuffer, new_h: usize, new_w: usize) -> Result<ImageBuffer> {
    if new_h < img.height || new_w < img.width {
        return Err(Error::Downscale {
            from: format!("{}x{}", img.height, img.width),
            to: format!("{new_h}x{new_w}"),
        });
    }
    if new_h == img.height && new_w == img.width {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    let out = bicubic_resize(&src, img.height, img.width, img.channels, new_h, new_w);
    ImageBuffer::new(
        new_h,
        new_w,
        img.channels,
        out.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    )
}

/// Single-channel binary edge map with values 0 or 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width} edge map"), format!("{} bytes", data.len())));
        }
        if data.iter().any(|&v| v != 0 && v != 255) {
            return Err(Error::Format("edge map values must be 0 or 255".into()));
        }
        Ok(EdgeMap { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| if f(i / width, i % width) { 255 } else { 0 }).collect();
        EdgeMap { height, width, data }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_edge(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] == 255
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 255).count()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<EdgeMap> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::OutOfBounds(format!(
                "crop ({top}, {left}, {height}, {width}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + width]);
        }
        Ok(EdgeMap { height, width, data })
    }

    /// Three identical channels holding 0.0 or 255.0, the form sent to a
    /// conditioned denoiser.
    pub fn to_tensor3(&self) -> LatentTensor {
        LatentTensor::from_fn(self.height, self.width, 3, |r, c, _| self.data[r * self.width + c] as f32)
    }

    /// Accepts 1- or 3-channel tensors; channel 0 is authoritative.
    pub fn from_tensor(t: &LatentTensor) -> Result<Self> {
        let data = (0..t.height() * t.width())
            .map(|i| match t.data()[i * t.channels()] {
                v if v == 0.0 => Ok(0u8),
                v if v == 255.0 => Ok(255u8),
                v => Err(Error::Format(format!("edge value {v} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        EdgeMap::new(t.height(), t.width(), data)
    }

    /// Fraction of edge pixels in each `factor x factor` block.
    pub fn block_density(&self, factor: usize) -> Result<Vec<f64>> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Indivisible(format!(
                "edge map {}x{} by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0.0f64; h * w];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.data[r * self.width + c] == 255 {
                    out[(r / factor) * w + c / factor] += 1.0;
                }
            }
        }
        let area = (factor * factor) as f64;
        out.iter_mut().for_each(|v| *v /= area);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upscale_identity_and_constant() {
        let img = ImageBuffer::from_fn(5, 7, 3, |r, c, ch| (r * 30 + c * 5 + ch) as u8).unwrap();
        assert_eq!(upscale_image(&img, 5, 7).unwrap(), img);
        let gray = ImageBuffer::new(4, 4, 1, vec![128; 16]).unwrap();
        let up = upscale_image(&gray, 9, 13).unwrap();
        assert!(up.data().iter().all(|&v| v == 128));
        assert!(upscale_image(&gray, 3, 4).is_err());
    }

    #[test]
    fn upscale_clamps_overshoot() {
        let img = ImageBuffer::from_fn(4, 4, 1, |_, c, _| if c < 2 { 0 } else { 255 }).unwrap();
        let up = upscale_image(&img, 4, 16).unwrap();
        assert_eq!(up.get(0, 0, 0), 0);
        assert_eq!(up.get(0, 15, 0), 255);
    }

    #[test]
    fn edge_map_validation_and_crop() {
        assert!(EdgeMap::new(1, 2, vec![0, 7]).is_err());
        let e = EdgeMap::from_fn(4, 4, |r, c| r == c);
        let crop = e.crop(1, 1, 2, 2).unwrap();
        assert_eq!(crop.data(), &[255, 0, 0, 255]);
        assert!(e.crop(3, 3, 2, 2).is_err());
        assert_eq!(EdgeMap::from_tensor(&e.to_tensor3()).unwrap(), e);
    }

    #[test]
    fn block_density() {
        let e = EdgeMap::from_fn(4, 4, |r, _| r == 0);
        assert_eq!(e.block_density(2).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert!(e.block_density(3).is_err());
    }

    #[test]
    fn luma_weights() {
        let img = ImageBuffer::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        assert!((img.luma()[0] - 0.299 * 255.0).abs() < 1e-12);
    }
}
