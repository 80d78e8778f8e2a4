use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{deactivate_scale, rotation_from_unit_quat, vec3};
use crate::model::{CanonicalField, GaussianPrimitive};
use crate::optim::{Adam, AdamConfig};
use crate::raster::{PrimitiveGrads, RenderGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    /// Threshold on the mean NDC-space positional gradient norm.
    pub grad_threshold: f64,
    pub interval: usize,
    pub opacity_threshold: f64,
    /// Optional screen-radius prune in pixels; off by default.
    pub max_screen_radius: Option<f64>,
    pub start: usize,
    /// Global iteration at which densification stops; `None` means 60% into the motion stage.
    pub stop: Option<usize>,
    /// Primitives whose largest scale exceeds this fraction of the scene extent are split.
    pub percent_dense: f64,
    pub max_primitives: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold: 2e-4,
            interval: 100,
            opacity_threshold: 0.005,
            max_screen_radius: None,
            start: 100,
            stop: None,
            percent_dense: 0.01,
            max_primitives: 2000,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        let radius_ok = self.max_screen_radius.is_none_or(|r| r > 0.0);
        if !(self.grad_threshold > 0.0 && self.opacity_threshold > 0.0 && self.percent_dense > 0.0 && radius_ok && self.interval >= 1) {
            return Err(Error::Invalid(format!("invalid densify config {self:?}")));
        }
        Ok(())
    }
}

/// Positional-gradient accumulators over one densify interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub count: Vec<u32>,
    pub max_radius: Vec<f64>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            count: vec![0; n],
            max_radius: vec![0.0; n],
        }
    }

    /// Adds one view; pixel-space mean gradients are converted to NDC units.
    pub fn accumulate(&mut self, grads: &RenderGrads, width: usize, height: usize) {
        let (sx, sy) = (0.5 * width as f64, 0.5 * height as f64);
        for i in 0..self.grad_sum.len() {
            if grads.visible[i] {
                let [du, dv] = grads.mean2d[i];
                self.grad_sum[i] += (du * sx).hypot(dv * sy);
                self.count[i] += 1;
                self.max_radius[i] = self.max_radius[i].max(grads.radius[i]);
            }
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Learning rates of the canonical parameter classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalRates {
    pub mean: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
}

/// Adam state per canonical parameter class, one row per primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalOptimizer {
    sh_stride: usize,
    mean: Adam,
    scale: Adam,
    rotation: Adam,
    opacity: Adam,
    sh_dc: Adam,
    sh_rest: Adam,
}

impl CanonicalOptimizer {
    pub fn new(rows: usize, sh_stride: usize) -> Self {
        let cfg = AdamConfig::default();
        Self {
            sh_stride,
            mean: Adam::new(rows * 3, cfg),
            scale: Adam::new(rows * 3, cfg),
            rotation: Adam::new(rows * 4, cfg),
            opacity: Adam::new(rows, cfg),
            sh_dc: Adam::new(rows * 3, cfg),
            sh_rest: Adam::new(rows * (sh_stride - 3), cfg),
        }
    }

    pub fn rows(&self) -> usize {
        self.opacity.len()
    }

    fn widths(&self) -> [usize; 6] {
        [3, 3, 4, 1, 3, self.sh_stride - 3]
    }

    fn states(&mut self) -> [&mut Adam; 6] {
        [
            &mut self.mean,
            &mut self.scale,
            &mut self.rotation,
            &mut self.opacity,
            &mut self.sh_dc,
            &mut self.sh_rest,
        ]
    }

    pub fn retain_rows(&mut self, keep: &[bool]) {
        let widths = self.widths();
        for (s, w) in self.states().into_iter().zip(widths) {
            s.retain_rows(keep, w);
        }
    }

    pub fn push_zero_rows(&mut self, rows: usize) {
        let widths = self.widths();
        for (s, w) in self.states().into_iter().zip(widths) {
            s.push_zero_rows(rows, w);
        }
    }

    /// Updates every class, or only the color classes when `color_only`.
    pub fn step(&mut self, field: &mut CanonicalField, grads: &PrimitiveGrads, rates: &CanonicalRates, color_only: bool) -> Result<()> {
        let n = field.len();
        if grads.len() != n || self.rows() != n || grads.sh_stride != self.sh_stride {
            return Err(Error::CountMismatch {
                what: "canonical optimizer rows",
                expected: n,
                actual: if grads.len() != n { grads.len() } else { self.rows() },
            });
        }
        let prims = &mut field.primitives;
        let stride = self.sh_stride;
        let sh_dc_g: Vec<f64> = (0..n).flat_map(|i| grads.sh_of(i)[..3].to_vec()).collect();
        let sh_rest_g: Vec<f64> = (0..n).flat_map(|i| grads.sh_of(i)[3..].to_vec()).collect();
        let mut dc: Vec<f64> = prims.iter().flat_map(|p| p.sh[..3].to_vec()).collect();
        let mut rest: Vec<f64> = prims.iter().flat_map(|p| p.sh[3..].to_vec()).collect();
        self.sh_dc.step(&mut dc, &sh_dc_g, rates.sh_dc)?;
        self.sh_rest.step(&mut rest, &sh_rest_g, rates.sh_rest)?;
        for (i, p) in prims.iter_mut().enumerate() {
            p.sh[..3].copy_from_slice(&dc[i * 3..i * 3 + 3]);
            p.sh[3..].copy_from_slice(&rest[i * (stride - 3)..(i + 1) * (stride - 3)]);
        }
        if color_only {
            return Ok(());
        }

        let mut mean: Vec<f64> = prims.iter().flat_map(|p| p.mean).collect();
        let mut scale: Vec<f64> = prims.iter().flat_map(|p| p.scale_raw).collect();
        let mut rot: Vec<f64> = prims.iter().flat_map(|p| p.rotation).collect();
        let mut opa: Vec<f64> = prims.iter().map(|p| p.opacity_raw).collect();
        let flat3 = |g: &[[f64; 3]]| g.iter().flatten().copied().collect::<Vec<_>>();
        self.mean.step(&mut mean, &flat3(&grads.mean), rates.mean)?;
        self.scale.step(&mut scale, &flat3(&grads.scale_raw), rates.scale)?;
        let rot_g: Vec<f64> = grads.rotation.iter().flatten().copied().collect();
        self.rotation.step(&mut rot, &rot_g, rates.rotation)?;
        self.opacity.step(&mut opa, &grads.opacity_raw, rates.opacity)?;
        for (i, p) in prims.iter_mut().enumerate() {
            p.mean.copy_from_slice(&mean[i * 3..i * 3 + 3]);
            p.scale_raw.copy_from_slice(&scale[i * 3..i * 3 + 3]);
            p.rotation.copy_from_slice(&rot[i * 4..i * 4 + 4]);
            p.opacity_raw = opa[i];
        }
        Ok(())
    }
}

/// Offset drawn from the primitive's own Gaussian.
fn sample_offset<R: Rng>(p: &GaussianPrimitive, rng: &mut R) -> [f64; 3] {
    let s = p.scale();
    let local = vec3(&std::array::from_fn(|a| s[a] * rng.sample::<f64, _>(StandardNormal)));
    let world = rotation_from_unit_quat(&p.unit_rotation()) * local;
    [world.x, world.y, world.z]
}

/// Clones small and splits large high-gradient primitives, then prunes transparent ones.
///
/// New primitives are appended after the surviving originals; optimizer rows
/// follow the same layout. Statistics are reset to the new count.
pub fn densify_and_prune<R: Rng>(
    field: &mut CanonicalField,
    stats: &mut DensifyStats,
    cfg: &DensifyConfig,
    extent: f64,
    mut optimizer: Option<&mut CanonicalOptimizer>,
    rng: &mut R,
) -> DensifyReport {
    let n = field.len();
    let mut report = DensifyReport::default();
    let mut candidates: Vec<usize> = (0..n).filter(|&i| stats.mean_grad(i) >= cfg.grad_threshold).collect();
    candidates.sort_by(|&a, &b| stats.mean_grad(b).total_cmp(&stats.mean_grad(a)).then(a.cmp(&b)));

    let mut keep = vec![true; n];
    let mut born = Vec::new();
    let mut count = n;
    for i in candidates {
        if count >= cfg.max_primitives {
            break;
        }
        let parent = &field.primitives[i];
        let largest = parent.scale().into_iter().fold(0.0, f64::max);
        if largest <= cfg.percent_dense * extent {
            let mut child = parent.clone();
            let off = sample_offset(parent, rng);
            child.mean = std::array::from_fn(|a| parent.mean[a] + off[a]);
            child.quantize();
            born.push(child);
            report.cloned += 1;
        } else {
            let scale_raw = parent.scale().map(|s| deactivate_scale(s / 1.6));
            for _ in 0..2 {
                let off = sample_offset(parent, rng);
                let mut child = parent.clone();
                child.mean = std::array::from_fn(|a| parent.mean[a] + off[a]);
                child.scale_raw = scale_raw;
                child.quantize();
                born.push(child);
            }
            keep[i] = false;
            report.split += 1;
        }
        count += 1;
    }

    let mut prims: Vec<GaussianPrimitive> = Vec::with_capacity(n + born.len());
    let mut radius = Vec::with_capacity(n + born.len());
    for (i, p) in field.primitives.drain(..).enumerate() {
        if keep[i] {
            prims.push(p);
            radius.push(stats.max_radius[i]);
        }
    }
    radius.extend(std::iter::repeat_n(0.0, born.len()));
    if let Some(opt) = optimizer.as_deref_mut() {
        opt.retain_rows(&keep);
        opt.push_zero_rows(born.len());
    }
    prims.extend(born);

    let survive: Vec<bool> = prims
        .iter()
        .zip(&radius)
        .map(|(p, &r)| p.opacity() >= cfg.opacity_threshold && cfg.max_screen_radius.is_none_or(|m| r <= m))
        .collect();
    report.pruned = survive.iter().filter(|&&s| !s).count();
    if let Some(opt) = optimizer {
        opt.retain_rows(&survive);
    }
    field.primitives = prims.into_iter().zip(&survive).filter(|(_, &s)| s).map(|(p, _)| p).collect();
    *stats = DensifyStats::new(field.len());
    report
}
