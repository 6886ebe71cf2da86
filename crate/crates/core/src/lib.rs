//! Training-free higher-resolution diffusion extrapolation.
//!
//! A latent generated at a model's native resolution is progressively upscaled,
//! re-noised and re-denoised at larger sizes. Each high-resolution step combines
//! a patch branch (overlapping windows, each with its own attention-derived
//! prompt and edge condition) with a global branch (strided sub-grids whose
//! values are shuffled between samples per position), blended on a cosine
//! schedule. The noise predictor is pluggable: analytic toys for verification
//! or a remote model over the framed protocol in [`denoiser::wire`].

pub mod denoiser;
pub mod dilated;
pub mod error;
pub mod patch;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod structure;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LatentTensor, NoiseSchedule, Shape};
