//! Face-over-mouth compositing and the two-branch head model.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{ConditionVector, FieldTrace, MotionField};
use crate::image::Image;
use crate::losses::{psnr, ssim};
use crate::model::{apply_deformation, BranchTag, Camera, CanonicalField, GaussianPrimitive};
use crate::raster::{render_forward, RenderOptions, RenderOutput};

/// `C_head = C_face · A_face + C_mouth · (1 - A_face)` per pixel.
pub fn fuse_head(c_face: &Image, a_face: &Image, c_mouth: &Image) -> Result<Image> {
    check_fusion_inputs(c_face, a_face, c_mouth)?;
    let mut out = c_mouth.clone();
    for p in 0..c_face.pixel_count() {
        let a = a_face.data[p];
        for c in 0..3 {
            let i = p * 3 + c;
            out.data[i] = c_face.data[i] * a + c_mouth.data[i] * (1.0 - a);
        }
    }
    Ok(out)
}

fn check_fusion_inputs(c_face: &Image, a_face: &Image, c_mouth: &Image) -> Result<()> {
    c_face.check_same_shape(c_mouth, "fusion colors")?;
    if c_face.channels != 3 {
        return Err(Error::Dimension {
            what: "fusion color channels",
            expected: 3,
            actual: c_face.channels,
        });
    }
    if a_face.width != c_face.width || a_face.height != c_face.height || a_face.channels != 1 {
        return Err(Error::ShapeMismatch {
            what: "fusion alpha",
            left: c_face.shape(),
            right: a_face.shape(),
        });
    }
    if let Some(p) = a_face.data.iter().position(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Invalid(format!(
            "face alpha {} at pixel ({}, {}) is outside [0, 1]",
            a_face.data[p],
            p % a_face.width,
            p / a_face.width
        )));
    }
    Ok(())
}

pub struct FusionGrads {
    pub c_face: Image,
    pub a_face: Image,
    pub c_mouth: Image,
}

pub fn fuse_head_backward(c_face: &Image, a_face: &Image, c_mouth: &Image, d_head: &Image) -> Result<FusionGrads> {
    check_fusion_inputs(c_face, a_face, c_mouth)?;
    c_face.check_same_shape(d_head, "fusion upstream gradient")?;
    let mut g = FusionGrads {
        c_face: Image::zeros(c_face.width, c_face.height, 3),
        a_face: Image::zeros(c_face.width, c_face.height, 1),
        c_mouth: Image::zeros(c_face.width, c_face.height, 3),
    };
    for p in 0..c_face.pixel_count() {
        let a = a_face.data[p];
        let mut da = 0.0;
        for c in 0..3 {
            let i = p * 3 + c;
            let d = d_head.data[i];
            g.c_face.data[i] = d * a;
            g.c_mouth.data[i] = d * (1.0 - a);
            da += d * (c_face.data[i] - c_mouth.data[i]);
        }
        g.a_face.data[p] = da;
    }
    Ok(g)
}

/// Canonical fields and motion fields of both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub sh_degree: usize,
    pub background: [f64; 3],
    pub face: CanonicalField,
    pub mouth: CanonicalField,
    pub face_field: MotionField,
    pub mouth_field: MotionField,
}

/// One branch rendered under one condition, with the state its backward pass needs.
pub struct BranchRender {
    pub primitives: Vec<GaussianPrimitive>,
    pub output: RenderOutput,
    pub trace: Option<FieldTrace>,
}

pub struct FrameRender {
    pub head: Image,
    pub face: BranchRender,
    pub mouth: BranchRender,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeadManifest {
    format_version: u32,
    sh_degree: usize,
    background: [f64; 3],
}

/// Deforms (when `deform`) and renders one branch.
pub fn render_branch(
    canonical: &CanonicalField,
    field: &MotionField,
    camera: &Camera,
    cond: &ConditionVector,
    options: RenderOptions,
    deform: bool,
) -> Result<BranchRender> {
    let (primitives, trace) = if deform {
        let means: Vec<[f64; 3]> = canonical.primitives.iter().map(|p| p.mean).collect();
        let (deltas, trace) = field.deform(&means, cond)?;
        (apply_deformation(canonical, &deltas)?, Some(trace))
    } else {
        (canonical.primitives.clone(), None)
    };
    let output = render_forward(&primitives, canonical.sh_degree, camera, options)?;
    Ok(BranchRender { primitives, output, trace })
}

impl HeadModel {
    /// Face over transparent, mouth over the background, then fused.
    pub fn render_frame(&self, camera: &Camera, cond: &ConditionVector) -> Result<FrameRender> {
        let face = render_branch(&self.face, &self.face_field, camera, cond, RenderOptions::default(), true)?;
        let mouth = render_branch(
            &self.mouth,
            &self.mouth_field,
            camera,
            cond,
            RenderOptions::with_background(self.background),
            true,
        )?;
        let head = fuse_head(&face.output.color, &face.output.alpha, &mouth.output.color)?;
        Ok(FrameRender { head, face, mouth })
    }

    /// Renders every frame in parallel; results are returned in frame order.
    pub fn render_sequence(
        &self,
        cameras: &[Camera],
        conds: &[ConditionVector],
        targets: Option<&[Image]>,
    ) -> Result<Vec<(Image, Option<FrameMetrics>)>> {
        if cameras.len() != conds.len() {
            return Err(Error::CountMismatch {
                what: "condition track",
                expected: cameras.len(),
                actual: conds.len(),
            });
        }
        if let Some(t) = targets {
            if t.len() != cameras.len() {
                return Err(Error::CountMismatch {
                    what: "target frames",
                    expected: cameras.len(),
                    actual: t.len(),
                });
            }
        }
        (0..cameras.len())
            .into_par_iter()
            .map(|i| {
                let head = self.render_frame(&cameras[i], &conds[i])?.head;
                let metrics = match targets {
                    Some(t) => Some(FrameMetrics {
                        frame: i,
                        psnr: psnr(&head, &t[i])?,
                        ssim: ssim(&head, &t[i])?,
                    }),
                    None => None,
                };
                Ok((head, metrics))
            })
            .collect()
    }

    /// Every tensor that is not a color coefficient, in a fixed order.
    pub fn non_color_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for field in [&self.face, &self.mouth] {
            for p in &field.primitives {
                out.extend_from_slice(&p.mean);
                out.extend_from_slice(&p.scale_raw);
                out.extend_from_slice(&p.rotation);
                out.push(p.opacity_raw);
            }
        }
        for f in [&self.face_field, &self.mouth_field] {
            for t in f.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = HeadManifest {
            format_version: FORMAT_VERSION,
            sh_degree: self.sh_degree,
            background: self.background,
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.face.save(dir, "face")?;
        self.mouth.save(dir, "mouth")?;
        self.face_field.save(dir, "face_field")?;
        self.mouth_field.save(dir, "mouth_field")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: HeadManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::data(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        let model = Self {
            sh_degree: manifest.sh_degree,
            background: manifest.background,
            face: CanonicalField::load(dir, "face")?,
            mouth: CanonicalField::load(dir, "mouth")?,
            face_field: MotionField::load(dir, "face_field")?,
            mouth_field: MotionField::load(dir, "mouth_field")?,
        };
        let kinds = [
            (model.face.branch, BranchTag::Face),
            (model.mouth.branch, BranchTag::Mouth),
            (model.face_field.kind, BranchTag::Face),
            (model.mouth_field.kind, BranchTag::Mouth),
        ];
        if kinds.iter().any(|(a, b)| a != b) || model.face.sh_degree != model.sh_degree || model.mouth.sh_degree != model.sh_degree {
            return Err(Error::data(&path, "branch tags or SH degrees are inconsistent"));
        }
        Ok(model)
    }
}
