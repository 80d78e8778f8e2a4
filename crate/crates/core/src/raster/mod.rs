//! Differentiable tile-based splatting.

mod backward;
mod forward;
mod project;

use std::path::Path;

pub use backward::{render_backward, PrimitiveGrads, RenderGrads};
pub use forward::{render_forward, render_naive, RenderAux, RenderOptions, RenderOutput, TILE_SIZE, TRANSMITTANCE_EPS};
pub use project::{project_gaussian, ProjectedGaussian, COVARIANCE_DILATION, MIN_ALPHA};

use crate::error::Result;
use crate::image::write_f32_le;

/// Debug dump: `<stem>.png` (color) and `<stem>_alpha.f32` (raw opacity).
pub fn dump_render(out: &RenderOutput, dir: &Path, stem: &str) -> Result<()> {
    out.color.save_png(&dir.join(format!("{stem}.png")))?;
    write_f32_le(&dir.join(format!("{stem}_alpha.f32")), out.alpha.data.iter().copied())
}
