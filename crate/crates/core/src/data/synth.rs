//! Analytic synthetic talking head: a front face shell with blinking eyes and
//! an opening jaw, in front of a mouth cavity with teeth.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{metric_names, write_dataset, DatasetManifest, FrameRecord};
use crate::error::{Error, Result};
use crate::fields::Bounds;
use crate::image::Image;
use crate::model::sh::eval_raw;
use crate::model::{Camera, GaussianPrimitive, Intrinsics};
use crate::raster::render_naive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Number of primitives on the face shell; eyes, cavity and teeth come on top.
    pub primitive_budget: usize,
    /// World-space jaw drop at full opening.
    pub jaw_amplitude: f64,
    /// Fraction of eye height closed at a full blink.
    pub blink_amplitude: f64,
    pub audio_dim: usize,
    pub expression_dim: usize,
    /// Gain of the jaw-to-audio mapping `a_k = tanh(c_k · (jaw - 0.5) · gain + d_k)`.
    pub audio_gain: f64,
    pub camera_distance: f64,
    /// Peak head yaw (radians) of the camera orbit over the clip.
    pub yaw_amplitude: f64,
    pub background: [f64; 3],
    /// Every `test_every`-th frame (offset `test_every - 1`) is held out.
    pub test_every: usize,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            frames: 60,
            width: 64,
            height: 64,
            primitive_budget: 700,
            jaw_amplitude: 0.3,
            blink_amplitude: 0.9,
            audio_dim: 16,
            expression_dim: 7,
            audio_gain: 3.0,
            camera_distance: 3.5,
            yaw_amplitude: 0.05,
            background: [0.0; 3],
            test_every: 6,
        }
    }
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frames > 0
            && self.width >= 11
            && self.height >= 11
            && self.primitive_budget > 0
            && self.audio_dim > 0
            && self.expression_dim > 0
            && self.test_every >= 2
            && self.camera_distance > 1.5
            && [self.jaw_amplitude, self.blink_amplitude, self.audio_gain, self.yaw_amplitude]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
            && self.blink_amplitude <= 1.0
            && self.background.iter().all(|v| (0.0..=1.0).contains(v));
        if !ok {
            return Err(Error::Invalid(format!("invalid synthetic scene spec: {self:?}")));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 1.2 * self.width as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: self.width as f64 / 2.0,
            cy: self.height as f64 / 2.0,
            width: self.width,
            height: self.height,
            near: 0.01,
        }
    }
}

const RADII: [f64; 3] = [0.75, 0.95, 0.7];
const MOUTH_Y: f64 = 0.42;
const SKIN: [f64; 3] = [0.86, 0.64, 0.52];
const LIP: [f64; 3] = [0.72, 0.3, 0.32];

/// Analytic animation state of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub jaw: f64,
    pub blink: f64,
}

#[derive(Clone, Debug)]
struct Part {
    prim: GaussianPrimitive,
    kind: PartKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PartKind {
    /// Shell primitive with its jaw weight.
    Shell(f64),
    Eye,
    Cavity,
    UpperTeeth,
    LowerTeeth,
}

impl PartKind {
    fn is_face(self) -> bool {
        matches!(self, PartKind::Shell(_) | PartKind::Eye)
    }
}

fn sh_for(color: [f64; 3]) -> Vec<f64> {
    let y00 = eval_raw(0, &[1.0, 1.0, 1.0], &[0.0, 0.0, 1.0])[0];
    color.iter().map(|c| c / y00).collect()
}

fn shell_z(x: f64, y: f64) -> f64 {
    let r = 1.0 - (x / RADII[0]).powi(2) - (y / RADII[1]).powi(2);
    -RADII[2] * r.max(0.0).sqrt()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Rest-pose parts of the head.
fn build_parts(spec: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> Vec<Part> {
    let mut parts = Vec::new();
    let light = Vector3::new(-0.4, -0.5, -0.75).normalize();
    // Fibonacci sampling of the front part of the ellipsoid (camera looks along +z),
    // front pole first so the budget never leaves a hole facing the camera
    let front_fraction = 0.58;
    let n_total = (spec.primitive_budget as f64 / front_fraction).ceil() as usize;
    let golden = TAU * (1.0 - 1.0 / 1.618_033_988_749_895);
    let spacing = (2.6 * TAU * 0.8 * 0.8 / n_total as f64).sqrt();
    for i in (0..n_total).rev() {
        let zu = 1.0 - 2.0 * (i as f64 + 0.5) / n_total as f64;
        let r = (1.0 - zu * zu).sqrt();
        let th = golden * i as f64;
        let unit = Vector3::new(r * th.cos(), r * th.sin(), zu);
        let p = Vector3::new(unit.x * RADII[0], unit.y * RADII[1], unit.z * RADII[2]);
        if p.z > 0.12 || parts.len() >= spec.primitive_budget {
            continue;
        }
        let normal = Vector3::new(p.x / RADII[0].powi(2), p.y / RADII[1].powi(2), p.z / RADII[2].powi(2)).normalize();
        let rot = UnitQuaternion::rotation_between(&Vector3::z(), &normal).unwrap_or_else(UnitQuaternion::identity);
        let q = rot.quaternion();
        let shade = 0.55 + 0.45 * normal.dot(&light).max(0.0);
        let lip = (p.y - MOUTH_Y).abs() < 0.07 && p.x.abs() < 0.32 && p.z < -0.3;
        let brow = (p.y + 0.4).abs() < 0.04 && (p.x.abs() - 0.28).abs() < 0.14 && p.z < -0.3;
        let base = if lip {
            LIP
        } else if brow {
            [0.3, 0.2, 0.15]
        } else {
            SKIN
        };
        let jitter = 1.0 + 0.06 * (rng.random::<f64>() - 0.5);
        let color = base.map(|c| (c * shade * jitter).clamp(0.0, 1.0));
        let jaw_weight = if p.y > MOUTH_Y { 1.0 - smoothstep(0.3, 0.55, p.x.abs()) } else { 0.0 };
        let prim = GaussianPrimitive::from_activated(
            [p.x, p.y, p.z],
            [0.5 * spacing, 0.5 * spacing, 0.012],
            [q.w, q.i, q.j, q.k],
            0.96,
            sh_for(color),
        );
        parts.push(Part {
            prim,
            kind: PartKind::Shell(jaw_weight),
        });
    }
    for sx in [-1.0, 1.0] {
        let (x, y) = (0.28 * sx, -0.16);
        parts.push(Part {
            prim: GaussianPrimitive::from_activated(
                [x, y, shell_z(x, y) - 0.025],
                [0.085, 0.045, 0.015],
                [1.0, 0.0, 0.0, 0.0],
                0.97,
                sh_for([0.12, 0.1, 0.12]),
            ),
            kind: PartKind::Eye,
        });
        parts.push(Part {
            prim: GaussianPrimitive::from_activated(
                [x, y, shell_z(x, y) - 0.02],
                [0.12, 0.055, 0.012],
                [1.0, 0.0, 0.0, 0.0],
                0.95,
                sh_for([0.93, 0.92, 0.9]),
            ),
            kind: PartKind::Eye,
        });
    }
    let step = 0.065;
    let mut y = MOUTH_Y - 0.04;
    while y <= MOUTH_Y + 0.32 {
        let mut x = -0.42;
        while x <= 0.42 {
            let t = rng.random::<f64>();
            let color = [0.38 + 0.08 * t, 0.09, 0.11];
            parts.push(Part {
                prim: GaussianPrimitive::from_activated(
                    [x, y, shell_z(x, y) + 0.13],
                    [0.05, 0.05, 0.03],
                    [1.0, 0.0, 0.0, 0.0],
                    0.92,
                    sh_for(color),
                ),
                kind: PartKind::Cavity,
            });
            x += step;
        }
        y += step;
    }
    for (kind, yt) in [(PartKind::UpperTeeth, MOUTH_Y + 0.035), (PartKind::LowerTeeth, MOUTH_Y + 0.11)] {
        let mut x = -0.22;
        while x <= 0.2201 {
            parts.push(Part {
                prim: GaussianPrimitive::from_activated(
                    [x, yt, shell_z(x, yt) + 0.06],
                    [0.026, 0.028, 0.01],
                    [1.0, 0.0, 0.0, 0.0],
                    0.95,
                    sh_for([0.95, 0.94, 0.88]),
                ),
                kind,
            });
            x += 0.055;
        }
    }
    parts
}

/// Parts deformed to a pose.
fn posed(parts: &[Part], pose: Pose, spec: &SynthSceneSpec) -> Vec<Part> {
    let drop = pose.jaw * spec.jaw_amplitude;
    parts
        .iter()
        .map(|part| {
            let mut p = part.clone();
            match part.kind {
                PartKind::Shell(w) => p.prim.mean[1] += drop * w,
                PartKind::LowerTeeth => p.prim.mean[1] += 0.3 * drop,
                PartKind::Eye => {
                    let s = p.prim.scale()[1] * (1.0 - spec.blink_amplitude * pose.blink);
                    p.prim.scale_raw[1] = crate::math::deactivate_scale(s.max(1e-4));
                }
                PartKind::Cavity | PartKind::UpperTeeth => {}
            }
            p
        })
        .collect()
}

/// Analytic jaw and blink traces.
pub fn pose_track(spec: &SynthSceneSpec) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::math::derive_seed(spec.seed, &[1]));
    let f1 = 2.5 + rng.random::<f64>();
    let f2 = 5.0 + 2.0 * rng.random::<f64>();
    let (p1, p2, pb) = (TAU * rng.random::<f64>(), TAU * rng.random::<f64>(), TAU * rng.random::<f64>());
    let fb = 3.0 + rng.random::<f64>();
    (0..spec.frames)
        .map(|i| {
            let t = i as f64 / spec.frames as f64;
            let jaw = (0.5 + 0.5 * (0.75 * (TAU * f1 * t + p1).sin() + 0.35 * (TAU * f2 * t + p2).sin())).clamp(0.0, 1.0);
            let blink = (TAU * fb * t + pb).cos().max(0.0).powi(6);
            Pose { jaw, blink }
        })
        .collect()
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
        .collect()
}

fn bounds_of<'a>(prims: impl Iterator<Item = &'a GaussianPrimitive>, margin: f64, extra_drop: f64) -> Bounds {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in prims {
        for a in 0..3 {
            lo[a] = lo[a].min(p.mean[a]);
            hi[a] = hi[a].max(p.mean[a]);
        }
    }
    hi[1] += extra_drop;
    Bounds {
        lo: lo.map(|v| v - margin),
        hi: hi.map(|v| v + margin),
    }
}

/// Renders every frame and mask and writes the dataset to `out`.
pub fn generate_synthetic(spec: &SynthSceneSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let parts = build_parts(spec, &mut rng);
    let intr = spec.intrinsics();
    let poses = pose_track(spec);

    let coeffs: Vec<(f64, f64)> = (0..spec.audio_dim)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0, (rng.random::<f64>() - 0.5) * 0.6))
        .collect();
    let nuisance: Vec<(f64, f64)> = (1..spec.expression_dim)
        .map(|_| (1.0 + 3.0 * rng.random::<f64>(), TAU * rng.random::<f64>()))
        .collect();
    let yaw_phase = TAU * rng.random::<f64>();

    let mut records = Vec::with_capacity(spec.frames);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut audio = Vec::with_capacity(spec.frames);
    let mut expression = Vec::with_capacity(spec.frames);
    for (i, pose) in poses.iter().enumerate() {
        let t = i as f64 / spec.frames as f64;
        let yaw = spec.yaw_amplitude * (TAU * t + yaw_phase).sin();
        let camera = Camera::orbit(Vector3::zeros(), spec.camera_distance, yaw, 0.0, &intr)?;
        let scene = posed(&parts, *pose, spec);
        let all: Vec<GaussianPrimitive> = scene.iter().map(|p| p.prim.clone()).collect();
        let face: Vec<GaussianPrimitive> = scene.iter().filter(|p| p.kind.is_face()).map(|p| p.prim.clone()).collect();
        let cavity: Vec<GaussianPrimitive> =
            scene.iter().filter(|p| !p.kind.is_face()).map(|p| p.prim.clone()).collect();
        let color = render_naive(&all, 0, &camera, Some(spec.background))?.color;
        let a_face = render_naive(&face, 0, &camera, None)?.alpha;
        let a_cavity = render_naive(&cavity, 0, &camera, None)?.alpha;
        let mouth = Image::from_fn(spec.width, spec.height, 1, |x, y, _| {
            let v = (1.0 - a_face.get(x, y, 0)) * a_cavity.get(x, y, 0);
            if v >= 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let face_mask = Image::from_fn(spec.width, spec.height, 1, |x, y, _| 1.0 - mouth.get(x, y, 0));
        frames.push((color, face_mask, mouth));

        audio.push(
            coeffs
                .iter()
                .map(|(c, d)| (c * (pose.jaw - 0.5) * spec.audio_gain + d).tanh())
                .collect::<Vec<f64>>(),
        );
        let mut e = vec![pose.blink];
        e.extend(nuisance.iter().map(|(f, ph)| 0.5 + 0.1 * (TAU * f * t + ph).sin()));
        expression.push(e);
        records.push(FrameRecord {
            frame: format!("frames/{i:05}.png"),
            mask_face: format!("masks_face/{i:05}.png"),
            mask_mouth: format!("masks_mouth/{i:05}.png"),
            extrinsics: camera.extrinsics(),
        });
    }

    let jaw: Vec<f64> = poses.iter().map(|p| p.jaw).collect();
    let blink: Vec<f64> = poses.iter().map(|p| p.blink).collect();
    let teeth: Vec<f64> = jaw.iter().map(|j| j * j).collect();
    let names = metric_names();
    let metrics: BTreeMap<String, Vec<f64>> = [
        (names[0].to_string(), min_max_normalize(&jaw)),
        (names[1].to_string(), min_max_normalize(&blink)),
        (names[2].to_string(), min_max_normalize(&teeth)),
    ]
    .into_iter()
    .collect();

    let face_bounds = bounds_of(parts.iter().filter(|p| p.kind.is_face()).map(|p| &p.prim), 0.08, spec.jaw_amplitude);
    let mouth_bounds = bounds_of(parts.iter().filter(|p| !p.kind.is_face()).map(|p| &p.prim), 0.05, 0.3 * spec.jaw_amplitude);
    let (train, test): (Vec<usize>, Vec<usize>) = (0..spec.frames).partition(|i| i % spec.test_every != spec.test_every - 1);
    let manifest = DatasetManifest {
        format_version: super::FORMAT_VERSION,
        frame_count: spec.frames,
        width: spec.width,
        height: spec.height,
        background: spec.background,
        intrinsics: intr,
        audio_dim: spec.audio_dim,
        expression_dim: spec.expression_dim,
        bounds: face_bounds,
        mouth_bounds,
        frames: records,
        train,
        test,
    };
    write_dataset(out, &manifest, &frames, &audio, &expression, &metrics)?;
    Ok(manifest)
}
