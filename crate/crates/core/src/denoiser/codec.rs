use crate::error::{Error, Result};
use crate::structure::ImageBuffer;
use crate::tensor::LatentTensor;

/// Maps latents to pixels and back. `decode` output is `spatial_factor` times
/// larger than its input in both dimensions.
pub trait Codec: Send + Sync {
    fn spatial_factor(&self) -> usize;
    fn decode(&self, z: &LatentTensor) -> Result<ImageBuffer>;
    fn encode(&self, img: &ImageBuffer) -> Result<LatentTensor>;
}

impl<T: Codec + ?Sized> Codec for std::sync::Arc<T> {
    fn spatial_factor(&self) -> usize {
        (**self).spatial_factor()
    }
    fn decode(&self, z: &LatentTensor) -> Result<ImageBuffer> {
        (**self).decode(z)
    }
    fn encode(&self, img: &ImageBuffer) -> Result<LatentTensor> {
        (**self).encode(img)
    }
}

/// Nearest-neighbour upsampling with the affine map `[-1, 1] -> [0, 255]`.
/// Latents with three or more channels decode to RGB from channels 0..3,
/// otherwise to gray from channel 0; `encode` fills channels the image does
/// not carry with zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyCodec {
    pub factor: usize,
    pub latent_channels: usize,
}

pub fn toy_codec(spatial_factor: usize) -> ToyCodec {
    ToyCodec { factor: spatial_factor.max(1), latent_channels: 4 }
}

impl ToyCodec {
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.latent_channels = channels;
        self
    }
}

pub(crate) fn to_pixel(v: f32) -> u8 {
    (127.5 * (v as f64 + 1.0)).round().clamp(0.0, 255.0) as u8
}

impl Codec for ToyCodec {
    fn spatial_factor(&self) -> usize {
        self.factor
    }

    fn decode(&self, z: &LatentTensor) -> Result<ImageBuffer> {
        let channels = if z.channels() >= 3 { 3 } else { 1 };
        if z.channels() == 0 {
            return Err(Error::Format("cannot decode a latent without channels".into()));
        }
        let f = self.factor;
        ImageBuffer::from_fn(z.height() * f, z.width() * f, channels, |r, c, ch| to_pixel(z.get(r / f, c / f, ch)))
    }

    fn encode(&self, img: &ImageBuffer) -> Result<LatentTensor> {
        let f = self.factor;
        if img.height % f != 0 || img.width % f != 0 {
            return Err(Error::Indivisible(format!(
                "image {}x{} by codec factor {f}",
                img.height, img.width
            )));
        }
        let area = (f * f) as f64;
        Ok(LatentTensor::from_fn(img.height / f, img.width / f, self.latent_channels, |r, c, ch| {
            if ch >= img.channels {
                return 0.0;
            }
            let mut acc = 0.0f64;
            for dr in 0..f {
                for dc in 0..f {
                    acc += img.get(r * f + dr, c * f + dc, ch) as f64;
                }
            }
            (acc / area / 127.5 - 1.0) as f32
        }))
    }
}
