use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::LatentTensor;

/// Mixes a master seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// Standard normal latent from a seeded stream.
pub fn gaussian_latent(height: usize, width: usize, channels: usize, seed: u64, tag: u64) -> LatentTensor {
    let mut rng = rng_for(seed, tag);
    LatentTensor::from_fn(height, width, channels, |_, _, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    })
}
