//! Canonical Gaussian field representation and deformation.

pub mod camera;
pub mod checkpoint;
pub mod gaussian;
pub mod sh;

pub use camera::{Camera, Extrinsics, Intrinsics};
pub use gaussian::{
    apply_deformation, covariance_from_scale_rotation, BranchTag, CanonicalField, DeformationDelta,
    GaussianPrimitive,
};
pub use sh::sh_to_color;
