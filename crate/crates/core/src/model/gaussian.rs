use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sh::{coeff_count, MAX_SH_DEGREE};
use crate::error::{Error, Result};
use crate::math::{self, activate_scale, deactivate_scale, normalize_quat, rotation_from_unit_quat, sigmoid};

/// Quaternions whose norm falls below this cannot be renormalized.
pub const MIN_QUAT_NORM: f64 = 1e-8;

/// One canonical Gaussian. Scale and opacity are stored pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: [f64; 3],
    pub scale_raw: [f64; 3],
    /// `(w, x, y, z)`; normalized before use.
    pub rotation: [f64; 4],
    pub opacity_raw: f64,
    /// SH coefficients, basis-major with RGB interleaved.
    pub sh: Vec<f64>,
}

impl GaussianPrimitive {
    /// Builds a primitive from activated values.
    pub fn from_activated(
        mean: [f64; 3],
        scale: [f64; 3],
        rotation: [f64; 4],
        opacity: f64,
        sh: Vec<f64>,
    ) -> Self {
        Self {
            mean,
            scale_raw: scale.map(deactivate_scale),
            rotation,
            opacity_raw: math::logit(opacity),
            sh,
        }
    }

    pub fn scale(&self) -> [f64; 3] {
        self.scale_raw.map(activate_scale)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_raw)
    }

    pub fn unit_rotation(&self) -> [f64; 4] {
        normalize_quat(&self.rotation).0
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_scale_rotation(&self.scale(), &self.unit_rotation())
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.scale_raw.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.opacity_raw.is_finite()
            && self.sh.iter().all(|v| v.is_finite())
    }

    /// Number of scalars in the flat on-disk layout.
    pub fn flat_len(sh_degree: usize) -> usize {
        3 + 3 + 4 + 1 + coeff_count(sh_degree)
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.mean);
        out.extend_from_slice(&self.scale_raw);
        out.extend_from_slice(&self.rotation);
        out.push(self.opacity_raw);
        out.extend_from_slice(&self.sh);
    }

    pub fn read_flat(flat: &[f64]) -> Self {
        Self {
            mean: [flat[0], flat[1], flat[2]],
            scale_raw: [flat[3], flat[4], flat[5]],
            rotation: [flat[6], flat[7], flat[8], flat[9]],
            opacity_raw: flat[10],
            sh: flat[11..].to_vec(),
        }
    }

    pub fn quantize(&mut self) {
        math::quantize_slice(&mut self.mean);
        math::quantize_slice(&mut self.scale_raw);
        math::quantize_slice(&mut self.rotation);
        self.opacity_raw = math::to_f32_grid(self.opacity_raw);
        math::quantize_slice(&mut self.sh);
    }
}

/// `R diag(s)^2 R^T` for activated scales and a unit quaternion.
pub fn covariance_from_scale_rotation(scale: &[f64; 3], q: &[f64; 4]) -> Result<Matrix3<f64>> {
    if scale.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("covariance input s={scale:?} q={q:?}"),
        });
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::Invalid(format!("scales must be positive, got {scale:?}")));
    }
    let r = rotation_from_unit_quat(q);
    let m = r * Matrix3::from_diagonal(&Vector3::from(*scale));
    Ok(m * m.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchTag {
    Face,
    Mouth,
}

impl BranchTag {
    pub fn name(self) -> &'static str {
        match self {
            BranchTag::Face => "face",
            BranchTag::Mouth => "mouth",
        }
    }
}

/// Persistent canonical primitives of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalField {
    pub sh_degree: usize,
    pub branch: BranchTag,
    pub primitives: Vec<GaussianPrimitive>,
}

impl CanonicalField {
    pub fn new(sh_degree: usize, branch: BranchTag) -> Result<Self> {
        if sh_degree > MAX_SH_DEGREE {
            return Err(Error::Invalid(format!("SH degree {sh_degree} exceeds {MAX_SH_DEGREE}")));
        }
        Ok(Self {
            sh_degree,
            branch,
            primitives: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn push(&mut self, p: GaussianPrimitive) -> Result<()> {
        if p.sh.len() != coeff_count(self.sh_degree) {
            return Err(Error::Dimension {
                what: "SH coefficients",
                expected: coeff_count(self.sh_degree),
                actual: p.sh.len(),
            });
        }
        self.primitives.push(p);
        Ok(())
    }

    /// `count` primitives uniformly inside `[lo, hi]`, isotropic scale equal to
    /// the mean nearest-neighbor distance, identity rotation, uniform gray DC.
    pub fn init_uniform<R: Rng>(
        sh_degree: usize,
        branch: BranchTag,
        count: usize,
        lo: [f64; 3],
        hi: [f64; 3],
        opacity: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut field = Self::new(sh_degree, branch)?;
        let means: Vec<[f64; 3]> = (0..count)
            .map(|_| std::array::from_fn(|a| lo[a] + (hi[a] - lo[a]) * rng.random::<f64>()))
            .collect();
        let scale = mean_nearest_neighbor_distance(&means).max(1e-4);
        let dc = 0.5 / super::sh::eval_raw(0, &[1.0, 1.0, 1.0], &[0.0, 0.0, 1.0])[0];
        for mean in means {
            let mut sh = vec![0.0; coeff_count(sh_degree)];
            sh[..3].fill(dc);
            let mut p = GaussianPrimitive::from_activated(mean, [scale; 3], [1.0, 0.0, 0.0, 0.0], opacity, sh);
            p.quantize();
            field.primitives.push(p);
        }
        Ok(field)
    }

    pub fn quantize(&mut self) {
        for p in &mut self.primitives {
            p.quantize();
        }
    }
}

/// Brute-force mean nearest-neighbor distance.
pub fn mean_nearest_neighbor_distance(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / points.len() as f64
}

/// Per-primitive deformation offsets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformationDelta {
    pub d_mean: [f64; 3],
    pub d_scale: [f64; 3],
    pub d_rotation: [f64; 4],
}

impl DeformationDelta {
    pub const ZERO: DeformationDelta = DeformationDelta {
        d_mean: [0.0; 3],
        d_scale: [0.0; 3],
        d_rotation: [0.0; 4],
    };

    pub fn translation(d_mean: [f64; 3]) -> Self {
        Self {
            d_mean,
            ..Self::ZERO
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean
            .iter()
            .chain(&self.d_scale)
            .chain(&self.d_rotation)
            .all(|v| v.is_finite())
    }

    pub fn negated(&self) -> Self {
        Self {
            d_mean: self.d_mean.map(|v| -v),
            d_scale: self.d_scale.map(|v| -v),
            d_rotation: self.d_rotation.map(|v| -v),
        }
    }
}

/// Deformed primitives `{mu + dmu, s + ds, q + dq, alpha, f}`. Scale offsets
/// act on raw scales; rotation sums are renormalized by the consumer.
pub fn apply_deformation(field: &CanonicalField, deltas: &[DeformationDelta]) -> Result<Vec<GaussianPrimitive>> {
    if deltas.len() != field.primitives.len() {
        return Err(Error::CountMismatch {
            what: "deformation deltas",
            expected: field.primitives.len(),
            actual: deltas.len(),
        });
    }
    field
        .primitives
        .iter()
        .zip(deltas)
        .enumerate()
        .map(|(index, (p, d))| {
            if !d.is_finite() {
                return Err(Error::Primitive {
                    index,
                    reason: "non-finite deformation".into(),
                });
            }
            let rotation: [f64; 4] = std::array::from_fn(|k| p.rotation[k] + d.d_rotation[k]);
            let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= MIN_QUAT_NORM) {
                return Err(Error::Primitive {
                    index,
                    reason: format!("deformed rotation has near-zero norm {norm:.3e}"),
                });
            }
            Ok(GaussianPrimitive {
                mean: std::array::from_fn(|k| p.mean[k] + d.d_mean[k]),
                scale_raw: std::array::from_fn(|k| p.scale_raw[k] + d.d_scale[k]),
                rotation,
                opacity_raw: p.opacity_raw,
                sh: p.sh.clone(),
            })
        })
        .collect()
}
