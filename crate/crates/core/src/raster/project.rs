use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math::{normalize_quat, rotation_from_unit_quat, vec3};
use crate::model::gaussian::{GaussianPrimitive, MIN_QUAT_NORM};
use crate::model::sh;
use crate::model::Camera;

/// Isotropic low-pass dilation added to every 2D covariance (pixels^2).
pub const COVARIANCE_DILATION: f64 = 0.3;
/// Contributions below this opacity are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;

/// A primitive projected onto the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    /// Pixel-space mean.
    pub mean: [f64; 2],
    /// Dilated 2D covariance `(xx, xy, yy)`.
    pub cov: [f64; 3],
    /// Inverse of `cov`, `(xx, xy, yy)`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Pixel rectangle `[x0, x1) x [y0, y1)` outside which the contribution is
    /// always below [`MIN_ALPHA`].
    pub rect: [usize; 4],
}

impl ProjectedGaussian {
    /// Screen-space radius of the visible footprint in pixels.
    pub fn radius(&self) -> f64 {
        let tr = 0.5 * (self.cov[0] + self.cov[2]);
        let det = self.cov[0] * self.cov[2] - self.cov[1] * self.cov[1];
        let lambda = tr + (tr * tr - det).max(0.0).sqrt();
        3.0 * lambda.sqrt()
    }
}

pub(crate) struct ProjectionParts {
    pub p_cam: Vector3<f64>,
    pub unit_q: [f64; 4],
    pub q_norm: f64,
    pub rot_q: Matrix3<f64>,
    pub scale: [f64; 3],
    pub cov3: Matrix3<f64>,
    pub jw: Matrix2x3<f64>,
    pub view_dir: [f64; 3],
    pub view_dist: f64,
}

pub(crate) fn projection_parts(p: &GaussianPrimitive, camera: &Camera) -> ProjectionParts {
    let mu = vec3(&p.mean);
    let p_cam = camera.rotation * mu + camera.translation;
    let (unit_q, q_norm) = normalize_quat(&p.rotation);
    let rot_q = rotation_from_unit_quat(&unit_q);
    let scale = p.scale();
    let m = rot_q * Matrix3::from_diagonal(&Vector3::from(scale));
    let cov3 = m * m.transpose();
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let j = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    );
    let jw = j * camera.rotation;
    let v = mu - camera.center();
    let view_dist = v.norm();
    let view_dir = [v.x / view_dist, v.y / view_dist, v.z / view_dist];
    ProjectionParts {
        p_cam,
        unit_q,
        q_norm,
        rot_q,
        scale,
        cov3,
        jw,
        view_dir,
        view_dist,
    }
}

/// EWA projection of one primitive; `Ok(None)` when culled.
pub fn project_gaussian(
    index: usize,
    p: &GaussianPrimitive,
    sh_degree: usize,
    camera: &Camera,
) -> Result<Option<ProjectedGaussian>> {
    if !p.is_finite() {
        return Err(Error::Primitive {
            index,
            reason: "non-finite parameter".into(),
        });
    }
    if p.sh.len() != sh::coeff_count(sh_degree) {
        return Err(Error::Primitive {
            index,
            reason: format!("expected {} SH coefficients, found {}", sh::coeff_count(sh_degree), p.sh.len()),
        });
    }
    let q_norm = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if q_norm < MIN_QUAT_NORM {
        return Err(Error::Primitive {
            index,
            reason: format!("rotation norm {q_norm:.3e} too small to normalize"),
        });
    }
    let mu = vec3(&p.mean);
    let depth = (camera.rotation * mu + camera.translation).z;
    if depth <= camera.near {
        return Ok(None);
    }
    let opacity = p.opacity();
    if opacity < MIN_ALPHA {
        return Ok(None);
    }
    let parts = projection_parts(p, camera);
    let cov2: Matrix2<f64> = parts.jw * parts.cov3 * parts.jw.transpose();
    let a = cov2[(0, 0)] + COVARIANCE_DILATION;
    let b = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    let c = cov2[(1, 1)] + COVARIANCE_DILATION;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return Ok(None);
    }
    let conic = [c / det, -b / det, a / det];
    let z = parts.p_cam.z;
    let mean = [
        camera.fx * parts.p_cam.x / z + camera.cx,
        camera.fy * parts.p_cam.y / z + camera.cy,
    ];
    // alpha * exp(-q/2) >= MIN_ALPHA only inside q <= 2 ln(alpha / MIN_ALPHA)
    let q_max = 2.0 * (opacity / MIN_ALPHA).ln().max(0.0);
    let pad = 1e-6;
    let ex = (q_max * a).sqrt() + pad;
    let ey = (q_max * c).sqrt() + pad;
    let Some((x0, x1)) = pixel_span(mean[0] - ex, mean[0] + ex, camera.width) else {
        return Ok(None);
    };
    let Some((y0, y1)) = pixel_span(mean[1] - ey, mean[1] + ey, camera.height) else {
        return Ok(None);
    };
    let color = sh::eval_raw(sh_degree, &p.sh, &parts.view_dir).map(|v| v.max(0.0));
    Ok(Some(ProjectedGaussian {
        index,
        mean,
        cov: [a, b, c],
        conic,
        depth,
        color,
        opacity,
        rect: [x0, x1, y0, y1],
    }))
}

/// Pixels whose centers `i + 0.5` fall inside `[lo, hi]`, as a half-open range.
fn pixel_span(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(size as f64 - 1.0);
    if !(first <= last) {
        return None;
    }
    Some((first as usize, last as usize + 1))
}
