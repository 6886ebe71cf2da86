//! Structural conditions: edges of the upscaled low-resolution image, cropped per patch.

mod canny;
mod image;
pub mod pnm;

pub use canny::{canny_edges, canny_with, gaussian_kernel, snap_magnitude, CannyParams};
pub use image::{upscale_image, EdgeMap, ImageBuffer};

use crate::error::{Error, Result};
use crate::patch::PatchPlan;

/// One crop per window of a pixel-space plan, index-aligned with the plan.
pub fn sample_condition_patches(edges: &EdgeMap, plan: &PatchPlan) -> Result<Vec<EdgeMap>> {
    if plan.parent_h != edges.height || plan.parent_w != edges.width {
        return Err(Error::Geometry(format!(
            "pixel plan {}x{} is misaligned with edge map {}x{}",
            plan.parent_h, plan.parent_w, edges.height, edges.width
        )));
    }
    plan.windows()
        .iter()
        .map(|w| edges.crop(w.top, w.left, w.height, w.width))
        .collect()
}
