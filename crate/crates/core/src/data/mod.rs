//! Dataset format, loader and synthetic generator.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! frames/%05d.png        RGB ground truth
//! masks_face/%05d.png    binary L8
//! masks_mouth/%05d.png   binary L8
//! cond/a.bin             frame_count × audio_dim little-endian f32
//! cond/e.bin             frame_count × expression_dim little-endian f32
//! cond/m.json            {metric name: [value per frame]}
//! ```

mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use synth::{generate_synthetic, pose_track, Pose, SynthSceneSpec};

use crate::error::{Error, Result};
use crate::fields::{Bounds, ConditionVector};
use crate::image::{read_f32_le, write_f32_le, Image};
use crate::model::{Camera, Extrinsics, Intrinsics};

pub const FORMAT_VERSION: u32 = 1;

/// Lips opening, blink degree and teeth visibility.
pub fn metric_names() -> [&'static str; 3] {
    ["lips_opening", "blink", "teeth_visibility"]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: String,
    pub mask_face: String,
    pub mask_mouth: String,
    pub extrinsics: Extrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub intrinsics: Intrinsics,
    pub audio_dim: usize,
    pub expression_dim: usize,
    /// Region covering the face surface over all frames.
    pub bounds: Bounds,
    /// Region covering the mouth interior over all frames.
    pub mouth_bounds: Bounds,
    pub frames: Vec<FrameRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub(crate) fn write_dataset(
    out: &Path,
    manifest: &DatasetManifest,
    images: &[(Image, Image, Image)],
    audio: &[Vec<f64>],
    expression: &[Vec<f64>],
    metrics: &BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (rec, (color, face, mouth)) in manifest.frames.iter().zip(images) {
        color.save_png(&out.join(&rec.frame))?;
        face.save_png(&out.join(&rec.mask_face))?;
        mouth.save_png(&out.join(&rec.mask_mouth))?;
    }
    write_f32_le(&out.join("cond/a.bin"), audio.iter().flatten().copied())?;
    write_f32_le(&out.join("cond/e.bin"), expression.iter().flatten().copied())?;
    write_json(&out.join("cond/m.json"), metrics)?;
    write_json(&out.join("manifest.json"), manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A decoded, validated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub frames: Vec<Image>,
    pub masks_face: Vec<Image>,
    pub masks_mouth: Vec<Image>,
    /// Ground truth multiplied by the face mask.
    pub face_targets: Vec<Image>,
    /// Ground truth multiplied by the mouth mask.
    pub mouth_targets: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub conditions: Vec<ConditionVector>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join("manifest.json");
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        let bad = |reason: String| Error::data(&manifest_path, reason);
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let n = manifest.frame_count;
        if n == 0 {
            return Err(bad("dataset has no frames".into()));
        }
        if manifest.frames.len() != n {
            return Err(bad(format!("frame_count is {n} but {} records are listed", manifest.frames.len())));
        }
        if manifest.intrinsics.width != manifest.width || manifest.intrinsics.height != manifest.height {
            return Err(bad("intrinsics image size differs from the dataset size".into()));
        }
        if let Some(i) = manifest.train.iter().chain(&manifest.test).find(|&&i| i >= n) {
            return Err(bad(format!("split index {i} is out of range")));
        }
        if !manifest.background.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(bad("background color must lie in [0, 1]".into()));
        }
        for rec in &manifest.frames {
            for file in [&rec.frame, &rec.mask_face, &rec.mask_mouth] {
                let path = root.join(file);
                if !path.is_file() {
                    return Err(Error::data(&path, "referenced file does not exist"));
                }
            }
        }
        let cameras = manifest
            .frames
            .iter()
            .map(|rec| Camera::new(&manifest.intrinsics, &rec.extrinsics))
            .collect::<Result<Vec<_>>>()?;

        let (w, h) = (manifest.width, manifest.height);
        let decoded: Vec<(Image, Image, Image)> = manifest
            .frames
            .par_iter()
            .map(|rec| {
                let path = root.join(&rec.frame);
                let frame = Image::load_png(&path)?;
                if frame.shape() != (h, w, 3) {
                    return Err(Error::data(&path, format!("expected a {w}x{h} RGB image")));
                }
                let face = load_mask(&root.join(&rec.mask_face), w, h)?;
                let mouth = load_mask(&root.join(&rec.mask_mouth), w, h)?;
                Ok((frame, face, mouth))
            })
            .collect::<Result<_>>()?;

        let audio = read_matrix(&root.join("cond/a.bin"), n, manifest.audio_dim)?;
        let expression = read_matrix(&root.join("cond/e.bin"), n, manifest.expression_dim)?;
        let m_path = root.join("cond/m.json");
        let metrics: BTreeMap<String, Vec<f64>> = read_json(&m_path)?;
        for (name, values) in &metrics {
            if values.len() != n {
                return Err(Error::data(&m_path, format!("metric `{name}` has {} values, expected {n}", values.len())));
            }
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::data(&m_path, format!("metric `{name}` value {v} is outside [0, 1]")));
            }
        }
        let conditions = (0..n)
            .map(|i| ConditionVector {
                audio: audio[i].clone(),
                expression: expression[i].clone(),
                metrics: metrics.iter().map(|(k, v)| (k.clone(), v[i])).collect(),
            })
            .collect();

        let mut frames = Vec::with_capacity(n);
        let mut masks_face = Vec::with_capacity(n);
        let mut masks_mouth = Vec::with_capacity(n);
        let mut face_targets = Vec::with_capacity(n);
        let mut mouth_targets = Vec::with_capacity(n);
        for (frame, face, mouth) in decoded {
            face_targets.push(frame.masked(&face)?);
            mouth_targets.push(frame.masked(&mouth)?);
            frames.push(frame);
            masks_face.push(face);
            masks_mouth.push(mouth);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            frames,
            masks_face,
            masks_mouth,
            face_targets,
            mouth_targets,
            cameras,
            conditions,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.manifest.train),
            "test" => Ok(&self.manifest.test),
            other => Err(Error::Invalid(format!("unknown split `{other}` (expected train or test)"))),
        }
    }

    /// Cameras and conditions of the given frames as a render track.
    pub fn track(&self, indices: &[usize]) -> Track {
        Track {
            intrinsics: self.manifest.intrinsics,
            frames: indices
                .iter()
                .map(|&i| TrackFrame {
                    extrinsics: self.manifest.frames[i].extrinsics,
                    audio: self.conditions[i].audio.clone(),
                    expression: self.conditions[i].expression.clone(),
                })
                .collect(),
        }
    }
}

fn load_mask(path: &Path, w: usize, h: usize) -> Result<Image> {
    let mask = Image::load_png(path)?;
    if mask.shape() != (h, w, 1) {
        return Err(Error::data(path, format!("expected a {w}x{h} single-channel mask")));
    }
    if let Some(v) = mask.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::data(path, format!("mask is not binary (found value {})", (v * 255.0).round())));
    }
    Ok(mask)
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    let values = read_f32_le(path)?;
    if values.len() != rows * cols {
        return Err(Error::data(path, format!("expected {rows}x{cols} values, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(path, "contains non-finite values"));
    }
    Ok(values.chunks(cols.max(1)).map(|c| c.to_vec()).collect())
}

/// Camera and condition sequence for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub intrinsics: Intrinsics,
    pub frames: Vec<TrackFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub extrinsics: Extrinsics,
    pub audio: Vec<f64>,
    pub expression: Vec<f64>,
}

impl Track {
    pub fn load(path: &Path) -> Result<Self> {
        let track: Track = read_json(path)?;
        if track.frames.is_empty() {
            return Err(Error::data(path, "track has no frames"));
        }
        Ok(track)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_json(path, self)
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.frames.iter().map(|f| Camera::new(&self.intrinsics, &f.extrinsics)).collect()
    }

    pub fn conditions(&self) -> Vec<ConditionVector> {
        self.frames
            .iter()
            .map(|f| ConditionVector {
                audio: f.audio.clone(),
                expression: f.expression.clone(),
                metrics: BTreeMap::new(),
            })
            .collect()
    }
}
