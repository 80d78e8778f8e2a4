//! Deformable Gaussian splatting for condition-driven dynamic heads.
//!
//! A persistent canonical Gaussian field per branch (face, inside mouth) is
//! deformed point-wise by grid-based motion fields conditioned on per-frame
//! audio and expression features, rendered by a differentiable tile
//! rasterizer, and fused into the final frame.

pub mod data;
pub mod error;
pub mod fields;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod math;
pub mod model;
pub mod optim;
pub mod raster;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
