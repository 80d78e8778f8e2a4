//! Central finite-difference verification of every analytic backward pass.
//!
//! Each parameter class is probed on independently seeded random
//! configurations. A raster probe whose ± perturbation changes any pixel's
//! contributor count straddles a skip-threshold discontinuity; it is counted
//! as skipped and redrawn.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{Bounds, ConditionVector, FieldConfig, HashEncoderConfig, MotionField};
use crate::fusion::{fuse_head, fuse_head_backward};
use crate::image::Image;
use crate::losses::{dssim_loss, dssim_loss_grad, l1_loss_grad, loss_finetune, LossWeights, PerceptualMetric, PyramidPerceptual};
use crate::math::derive_seed;
use crate::model::{BranchTag, Camera, DeformationDelta, GaussianPrimitive, Intrinsics};
use crate::raster::{render_backward, render_forward, render_naive, RenderOptions};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Raster,
    Fields,
    Losses,
    Fusion,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Raster, Module::Fields, Module::Losses, Module::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Module::Raster => "raster",
            Module::Fields => "fields",
            Module::Losses => "losses",
            Module::Fusion => "fusion",
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown gradcheck module `{s}` (expected raster, fields, losses or fusion)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub configurations: usize,
    /// Probes per class and configuration.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            configurations: 20,
            probes: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub module: &'static str,
    pub class: &'static str,
    pub configurations: usize,
    pub probes: usize,
    pub skipped: usize,
    pub max_rel: f64,
}

impl ClassReport {
    pub fn passed(&self) -> bool {
        self.probes > 0 && self.max_rel <= TOLERANCE
    }
}

/// Per-class accumulation across configurations.
struct Tally {
    module: &'static str,
    classes: BTreeMap<&'static str, ClassReport>,
    order: Vec<&'static str>,
}

impl Tally {
    fn new(module: &'static str) -> Self {
        Self {
            module,
            classes: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    fn entry(&mut self, class: &'static str) -> &mut ClassReport {
        if !self.classes.contains_key(class) {
            self.order.push(class);
        }
        let module = self.module;
        self.classes.entry(class).or_insert(ClassReport {
            module,
            class,
            configurations: 0,
            probes: 0,
            skipped: 0,
            max_rel: 0.0,
        })
    }

    fn probe(&mut self, class: &'static str, analytic: f64, numeric: f64) {
        let e = self.entry(class);
        e.probes += 1;
        e.max_rel = e.max_rel.max(relative_error(analytic, numeric));
    }

    fn finish(mut self) -> Vec<ClassReport> {
        self.order.iter().map(|c| self.classes.remove(c).expect("class recorded")).collect()
    }
}

pub fn check_module(module: Module, cfg: &GradcheckConfig) -> Result<Vec<ClassReport>> {
    match module {
        Module::Raster => check_raster(cfg),
        Module::Fields => check_fields(cfg),
        Module::Losses => check_losses(cfg),
        Module::Fusion => check_fusion(cfg),
    }
}

fn config_rng(cfg: &GradcheckConfig, module: Module, c: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[module as u64, c as u64]))
}

fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize, ch: usize, lo: f64, hi: f64) -> Image {
    Image::from_fn(w, h, ch, |_, _, _| lo + (hi - lo) * rng.random::<f64>())
}

fn dot(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

const RASTER_CLASSES: [&str; 5] = ["mean", "scale", "rotation", "opacity", "color"];

/// Random primitives around the origin with bright DC colors.
pub fn random_scene<R: Rng>(rng: &mut R, n: usize, sh_degree: usize) -> Vec<GaussianPrimitive> {
    let z = 3 * (sh_degree + 1) * (sh_degree + 1);
    (0..n)
        .map(|_| {
            let mut sh: Vec<f64> = (0..z).map(|_| 0.3 * (rng.random::<f64>() - 0.5)).collect();
            for v in &mut sh[..3] {
                *v = 1.0 + 2.0 * rng.random::<f64>();
            }
            GaussianPrimitive {
                mean: std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0),
                scale_raw: std::array::from_fn(|_| -3.5 + 1.5 * rng.random::<f64>()),
                rotation: std::array::from_fn(|_| rng.random::<f64>() - 0.5),
                opacity_raw: -2.0 + 2.5 * rng.random::<f64>(),
                sh,
            }
        })
        .collect()
}

fn square_intrinsics(size: usize) -> Intrinsics {
    Intrinsics {
        fx: 1.2 * size as f64,
        fy: 1.2 * size as f64,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        near: 0.2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub scenes: usize,
    pub max_color_diff: f64,
    pub max_alpha_diff: f64,
}

/// Tile renderer against the per-pixel compositor on seeded random 64×64 scenes
/// of up to 200 primitives, early termination off.
pub fn oracle_equivalence(scenes: usize, seed: u64) -> Result<OracleReport> {
    let intr = square_intrinsics(64);
    let options = RenderOptions { background: None, early_termination: false };
    let mut report = OracleReport { scenes, max_color_diff: 0.0, max_alpha_diff: 0.0 };
    for s in 0..scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x0AC1E, s as u64]));
        let camera = Camera::orbit(Vector3::zeros(), 4.0, rng.random::<f64>() - 0.5, 0.3 * (rng.random::<f64>() - 0.5), &intr)?;
        let n = 1 + rng.random_range(0..200);
        let scene = random_scene(&mut rng, n, 1);
        let tile = render_forward(&scene, 1, &camera, options)?;
        let naive = render_naive(&scene, 1, &camera, None)?;
        report.max_color_diff = report.max_color_diff.max(tile.color.max_abs_diff(&naive.color));
        report.max_alpha_diff = report.max_alpha_diff.max(tile.alpha.max_abs_diff(&naive.alpha));
    }
    Ok(report)
}

fn raster_param(p: &mut GaussianPrimitive, class: usize, k: usize) -> &mut f64 {
    match class {
        0 => &mut p.mean[k % 3],
        1 => &mut p.scale_raw[k % 3],
        2 => &mut p.rotation[k % 4],
        3 => &mut p.opacity_raw,
        _ => {
            let n = p.sh.len();
            &mut p.sh[k % n]
        }
    }
}

/// Gaussian parameters μ, s, q, α and f through the tile rasterizer.
pub fn check_raster(cfg: &GradcheckConfig) -> Result<Vec<ClassReport>> {
    let (size, n, sh_degree) = (32, 30, 1);
    let intr = square_intrinsics(size);
    let mut tally = Tally::new("raster");
    for c in 0..cfg.configurations {
        let mut rng = config_rng(cfg, Module::Raster, c);
        let camera = Camera::orbit(Vector3::zeros(), 4.0, rng.random::<f64>() - 0.5, 0.3 * (rng.random::<f64>() - 0.5), &intr)?;
        let z = 3 * (sh_degree + 1) * (sh_degree + 1);
        let scene = random_scene(&mut rng, n, sh_degree);
        let background = (c % 2 == 1).then(|| std::array::from_fn(|_| rng.random::<f64>()));
        let options = RenderOptions { background, early_termination: true };
        let w_c = random_image(&mut rng, size, size, 3, -1.0, 1.0);
        let w_a = random_image(&mut rng, size, size, 1, -1.0, 1.0);
        let eval = |s: &[GaussianPrimitive]| -> Result<(f64, Vec<u32>)> {
            let out = render_forward(s, sh_degree, &camera, options)?;
            Ok((dot(&out.color, &w_c) + dot(&out.alpha, &w_a), out.contributors))
        };
        let out = render_forward(&scene, sh_degree, &camera, options)?;
        let g = render_backward(&scene, &out, &w_c, Some(&w_a))?;
        let visible: Vec<usize> = (0..n).filter(|&i| g.visible[i]).collect();
        if visible.is_empty() {
            continue;
        }
        for (class, name) in RASTER_CLASSES.iter().enumerate() {
            tally.entry(name).configurations += 1;
            let mut done = 0;
            let mut attempts = 0;
            while done < cfg.probes && attempts < 20 * cfg.probes {
                attempts += 1;
                let i = visible[rng.random_range(0..visible.len())];
                let k = rng.random_range(0..z);
                let analytic = match class {
                    0 => g.params.mean[i][k % 3],
                    1 => g.params.scale_raw[i][k % 3],
                    2 => g.params.rotation[i][k % 4],
                    3 => g.params.opacity_raw[i],
                    _ => g.params.sh_of(i)[k % z],
                };
                let mut plus = scene.clone();
                *raster_param(&mut plus[i], class, k) += STEP;
                let mut minus = scene.clone();
                *raster_param(&mut minus[i], class, k) -= STEP;
                let ((lp, cp), (lm, cm)) = (eval(&plus)?, eval(&minus)?);
                if cp != cm {
                    tally.entry(name).skipped += 1;
                    continue;
                }
                tally.probe(name, analytic, (lp - lm) / (2.0 * STEP));
                done += 1;
            }
        }
    }
    Ok(tally.finish())
}

fn field_objective(f: &MotionField, pts: &[[f64; 3]], cond: &ConditionVector, up: &[DeformationDelta]) -> Result<f64> {
    let (d, _) = f.deform(pts, cond)?;
    Ok(d.iter()
        .zip(up)
        .map(|(d, u)| {
            (0..3).map(|k| d.d_mean[k] * u.d_mean[k] + d.d_scale[k] * u.d_scale[k]).sum::<f64>()
                + (0..4).map(|k| d.d_rotation[k] * u.d_rotation[k]).sum::<f64>()
        })
        .sum())
}

fn field_class(name: &str) -> &'static str {
    match name {
        "tables" => "hash_tables",
        "attention" => "attention_grid",
        _ => "decoder",
    }
}

/// Hash tables, attention grids and decoder tensors of both field kinds.
pub fn check_fields(cfg: &GradcheckConfig) -> Result<Vec<ClassReport>> {
    let field_cfg = FieldConfig {
        encoder: HashEncoderConfig {
            levels: 4,
            features: 2,
            log2_table_size: 10,
            base_resolution: 4,
            growth: 1.7,
        },
        audio_dim: 6,
        expression_dim: 3,
        hidden: 16,
        depth: 2,
        attention_resolution: 8,
    };
    let bounds = Bounds { lo: [-1.0; 3], hi: [1.0; 3] };
    let mut tally = Tally::new("fields");
    for c in 0..cfg.configurations {
        for kind in [BranchTag::Face, BranchTag::Mouth] {
            let mut rng = config_rng(cfg, Module::Fields, 2 * c + kind as usize);
            let mut f = MotionField::new(kind, field_cfg, bounds, rng.random());
            for t in f.tensors_mut() {
                for v in t.iter_mut() {
                    *v = rng.random::<f64>() - 0.5;
                }
            }
            let cond = ConditionVector {
                audio: (0..field_cfg.audio_dim).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect(),
                expression: (0..field_cfg.expression_dim).map(|_| rng.random::<f64>()).collect(),
                metrics: BTreeMap::new(),
            };
            let pts: Vec<[f64; 3]> = (0..6).map(|_| std::array::from_fn(|_| 1.8 * rng.random::<f64>() - 0.9)).collect();
            let up: Vec<DeformationDelta> = (0..pts.len())
                .map(|_| DeformationDelta {
                    d_mean: std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0),
                    d_scale: std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0),
                    d_rotation: std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0),
                })
                .collect();
            let (_, trace) = f.deform(&pts, &cond)?;
            let grads = f.backward(&trace, &up)?;
            let names = f.tensor_names();
            let mut seen = Vec::new();
            for (t, name) in names.iter().enumerate() {
                let class = field_class(name);
                if !seen.contains(&class) {
                    seen.push(class);
                    tally.entry(class).configurations += 1;
                }
                let touched: Vec<usize> = (0..grads.tensors[t].len()).filter(|&i| grads.tensors[t][i] != 0.0).collect();
                if touched.is_empty() {
                    continue;
                }
                for _ in 0..cfg.probes {
                    let i = touched[rng.random_range(0..touched.len())];
                    let orig = f.tensors()[t][i];
                    f.tensors_mut()[t][i] = orig + STEP;
                    let lp = field_objective(&f, &pts, &cond, &up)?;
                    f.tensors_mut()[t][i] = orig - STEP;
                    let lm = field_objective(&f, &pts, &cond, &up)?;
                    f.tensors_mut()[t][i] = orig;
                    tally.probe(class, grads.tensors[t][i], (lp - lm) / (2.0 * STEP));
                }
            }
            tally.entry("field_positions").configurations += 1;
            for _ in 0..cfg.probes {
                let (i, a) = (rng.random_range(0..pts.len()), rng.random_range(0..3));
                let mut p = pts.clone();
                p[i][a] += STEP;
                let lp = field_objective(&f, &p, &cond, &up)?;
                p[i][a] -= 2.0 * STEP;
                let lm = field_objective(&f, &p, &cond, &up)?;
                tally.probe("field_positions", grads.positions[i][a], (lp - lm) / (2.0 * STEP));
            }
        }
    }
    Ok(tally.finish())
}

fn probe_image(
    tally: &mut Tally,
    class: &'static str,
    at: &Image,
    grad: &Image,
    probes: usize,
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&Image) -> Result<f64>,
) -> Result<()> {
    tally.entry(class).configurations += 1;
    for _ in 0..probes {
        let i = rng.random_range(0..at.data.len());
        let mut p = at.clone();
        p.data[i] += STEP;
        let lp = f(&p)?;
        p.data[i] -= 2.0 * STEP;
        let lm = f(&p)?;
        tally.probe(class, grad.data[i], (lp - lm) / (2.0 * STEP));
    }
    Ok(())
}

/// L1, D-SSIM (plain and masked), perceptual and the fine-tuning objective.
pub fn check_losses(cfg: &GradcheckConfig) -> Result<Vec<ClassReport>> {
    let (w, h) = (24, 20);
    let weights = LossWeights::default();
    let perceptual = PyramidPerceptual::default();
    let mut tally = Tally::new("losses");
    for c in 0..cfg.configurations {
        let mut rng = config_rng(cfg, Module::Losses, c);
        let a = random_image(&mut rng, w, h, 3, 0.0, 1.0);
        let b = random_image(&mut rng, w, h, 3, 0.0, 1.0);
        let mask = Image::from_fn(w, h, 1, |_, _, _| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 });

        let (_, g) = l1_loss_grad(&a, &b, Some(&mask))?;
        probe_image(&mut tally, "l1", &a, &g, cfg.probes, &mut rng, &|x| Ok(l1_loss_grad(x, &b, Some(&mask))?.0))?;
        let (_, g) = dssim_loss_grad(&a, &b, None)?;
        probe_image(&mut tally, "dssim", &a, &g, cfg.probes, &mut rng, &|x| dssim_loss(x, &b, None))?;
        let (_, g) = dssim_loss_grad(&a, &b, Some(&mask))?;
        probe_image(&mut tally, "dssim_masked", &a, &g, cfg.probes, &mut rng, &|x| dssim_loss(x, &b, Some(&mask)))?;
        let (_, g) = perceptual.loss_and_grad(&a, &b)?;
        probe_image(&mut tally, "perceptual", &a, &g, cfg.probes, &mut rng, &|x| perceptual.loss(x, &b))?;
        let (_, g) = loss_finetune(&a, &b, &weights, &perceptual)?;
        probe_image(&mut tally, "finetune_total", &a, &g, cfg.probes, &mut rng, &|x| {
            Ok(loss_finetune(x, &b, &weights, &perceptual)?.0.total)
        })?;
    }
    Ok(tally.finish())
}

/// Face color, face opacity and mouth color through the compositor.
pub fn check_fusion(cfg: &GradcheckConfig) -> Result<Vec<ClassReport>> {
    let (w, h) = (8, 8);
    let mut tally = Tally::new("fusion");
    for c in 0..cfg.configurations {
        let mut rng = config_rng(cfg, Module::Fusion, c);
        let cf = random_image(&mut rng, w, h, 3, 0.0, 1.0);
        let af = random_image(&mut rng, w, h, 1, 0.05, 0.95);
        let cm = random_image(&mut rng, w, h, 3, 0.0, 1.0);
        let up = random_image(&mut rng, w, h, 3, -1.0, 1.0);
        let g = fuse_head_backward(&cf, &af, &cm, &up)?;
        probe_image(&mut tally, "face_color", &cf, &g.c_face, cfg.probes, &mut rng, &|x| Ok(dot(&fuse_head(x, &af, &cm)?, &up)))?;
        probe_image(&mut tally, "face_opacity", &af, &g.a_face, cfg.probes, &mut rng, &|x| Ok(dot(&fuse_head(&cf, x, &cm)?, &up)))?;
        probe_image(&mut tally, "mouth_color", &cm, &g.c_mouth, cfg.probes, &mut rng, &|x| Ok(dot(&fuse_head(&cf, &af, x)?, &up)))?;
    }
    Ok(tally.finish())
}
