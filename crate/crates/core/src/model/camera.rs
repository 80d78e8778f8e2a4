use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera. Camera space looks down `+z` with `x` right and `y` down;
/// pixel `(i, j)` covers `[i, i+1) x [j, j+1)` so its center is at `i + 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

/// World-to-camera rigid transform as stored on disk (row-major rotation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn new(intr: &Intrinsics, extr: &Extrinsics) -> Result<Self> {
        let cam = Camera {
            rotation: Matrix3::from_row_slice(&extr.rotation),
            translation: Vector3::from(extr.translation),
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            near: intr.near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with world `-y` as up.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, intr: &Intrinsics) -> Result<Self> {
        let forward = (target - eye).normalize();
        let down_hint = Vector3::new(0.0, 1.0, 0.0);
        let right = down_hint.cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let cam = Camera {
            rotation,
            translation: -(rotation * eye),
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            near: intr.near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera orbiting `target` at `radius` with yaw/pitch angles in radians.
    pub fn orbit(target: Vector3<f64>, radius: f64, yaw: f64, pitch: f64, intr: &Intrinsics) -> Result<Self> {
        let rot = Rotation3::from_euler_angles(pitch, yaw, 0.0);
        let eye = target + rot * Vector3::new(0.0, 0.0, -radius);
        Self::look_at(eye, target, intr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("camera image size must be at least 1x1".into()));
        }
        let vals = [self.fx, self.fy, self.cx, self.cy, self.near];
        if vals.iter().any(|v| !v.is_finite())
            || self.rotation.iter().any(|v| !v.is_finite())
            || self.translation.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { what: "camera".into() });
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::Invalid(format!(
                "camera rotation is not orthonormal (error {err:.3e})"
            )));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 || self.near <= 0.0 {
            return Err(Error::Invalid("focal lengths and near plane must be positive".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            near: self.near,
        }
    }

    pub fn extrinsics(&self) -> Extrinsics {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[3 * r + c] = self.rotation[(r, c)];
            }
        }
        Extrinsics {
            rotation,
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }
}
