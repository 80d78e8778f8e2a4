//! Grid-based motion fields mapping canonical positions and per-frame
//! conditions to per-primitive deformations.

mod attention;
mod grid;
mod hash;
mod mlp;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionTrace, RegionAttentionField};
pub use grid::{Bilinear, Bounds, PLANES};
pub use hash::{EncodingTrace, HashEncoderConfig, TriPlaneHashEncoder};
pub use mlp::{MlpDecoder, MlpGrads, MlpTrace};

use crate::error::{Error, Result};
use crate::image::{read_f32_le, write_f32_le};
use crate::math::quantize_slice;
use crate::model::{BranchTag, DeformationDelta};

const FORMAT_VERSION: u32 = 1;

/// Per-frame driving signals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub audio: Vec<f64>,
    pub expression: Vec<f64>,
    /// Named motion metrics, each normalized to `[0, 1]`.
    pub metrics: BTreeMap<String, f64>,
}

impl ConditionVector {
    pub fn validate(&self) -> Result<()> {
        let finite = self.audio.iter().chain(&self.expression).chain(self.metrics.values()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite { what: "condition vector".into() });
        }
        Ok(())
    }

    pub fn metric(&self, name: &str) -> Result<f64> {
        self.metrics
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown motion metric `{name}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoder: HashEncoderConfig,
    pub audio_dim: usize,
    pub expression_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub attention_resolution: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoder: HashEncoderConfig::default(),
            audio_dim: 16,
            expression_dim: 7,
            hidden: 64,
            depth: 3,
            attention_resolution: 32,
        }
    }
}

/// Deformation field of one branch.
///
/// The face kind gates audio and expression by region attention and emits
/// `(Δμ, Δs, Δq)`; the mouth kind sees audio only and emits `Δμ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub kind: BranchTag,
    pub config: FieldConfig,
    pub encoder: TriPlaneHashEncoder,
    pub attention: Option<RegionAttentionField>,
    pub decoder: MlpDecoder,
}

/// Forward state needed by [`MotionField::backward`].
#[derive(Clone, Debug)]
pub struct FieldTrace {
    encodings: Vec<EncodingTrace>,
    attention: Vec<AttentionTrace>,
    mlp: MlpTrace,
    audio: Vec<f64>,
    expression: Vec<f64>,
}

impl FieldTrace {
    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }
}

/// Gradients aligned with [`MotionField::tensor_names`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub tensors: Vec<Vec<f64>>,
    /// Gradient with respect to the query positions.
    pub positions: Vec<[f64; 3]>,
}

impl FieldGrads {
    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl MotionField {
    /// Randomly initialized tables and hidden layers, zero output head, all on the f32 grid.
    pub fn new(kind: BranchTag, config: FieldConfig, bounds: Bounds, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TriPlaneHashEncoder::new(config.encoder, bounds, &mut rng);
        let attention = match kind {
            BranchTag::Face => Some(RegionAttentionField::new(
                bounds,
                config.attention_resolution,
                config.audio_dim + config.expression_dim,
            )),
            BranchTag::Mouth => None,
        };
        let decoder = MlpDecoder::new(
            Self::input_dim_for(kind, &config),
            config.hidden,
            config.depth,
            Self::output_dim_for(kind),
            &mut rng,
        );
        let mut field = Self {
            kind,
            config,
            encoder,
            attention,
            decoder,
        };
        field.quantize();
        field
    }

    fn input_dim_for(kind: BranchTag, config: &FieldConfig) -> usize {
        let enc = 3 * config.encoder.levels * config.encoder.features;
        match kind {
            BranchTag::Face => enc + config.audio_dim + config.expression_dim,
            BranchTag::Mouth => enc + config.audio_dim,
        }
    }

    fn output_dim_for(kind: BranchTag) -> usize {
        match kind {
            BranchTag::Face => 10,
            BranchTag::Mouth => 3,
        }
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["tables".to_string()];
        if self.attention.is_some() {
            names.push("attention".to_string());
        }
        for l in 0..self.decoder.depth() {
            names.push(format!("decoder.w{l}"));
            names.push(format!("decoder.b{l}"));
        }
        names
    }

    /// Whether a tensor is a decoder weight matrix (subject to weight decay).
    pub fn is_decoder_weight(name: &str) -> bool {
        name.starts_with("decoder.w")
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.encoder.params];
        if let Some(att) = &self.attention {
            out.push(&att.params);
        }
        for (w, b) in self.decoder.weights.iter().zip(&self.decoder.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.encoder.params];
        if let Some(att) = &mut self.attention {
            out.push(&mut att.params);
        }
        for (w, b) in self.decoder.weights.iter_mut().zip(self.decoder.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn quantize(&mut self) {
        for t in self.tensors_mut() {
            quantize_slice(t);
        }
    }

    fn check_condition(&self, cond: &ConditionVector) -> Result<()> {
        cond.validate()?;
        if cond.audio.len() != self.config.audio_dim {
            return Err(Error::Dimension {
                what: "audio feature",
                expected: self.config.audio_dim,
                actual: cond.audio.len(),
            });
        }
        if self.kind == BranchTag::Face && cond.expression.len() != self.config.expression_dim {
            return Err(Error::Dimension {
                what: "expression feature",
                expected: self.config.expression_dim,
                actual: cond.expression.len(),
            });
        }
        Ok(())
    }

    /// Deformations for every position under one condition.
    pub fn deform(&self, means: &[[f64; 3]], cond: &ConditionVector) -> Result<(Vec<DeformationDelta>, FieldTrace)> {
        self.check_condition(cond)?;
        if let Some(index) = means.iter().position(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::Primitive {
                index,
                reason: "non-finite position".into(),
            });
        }
        let enc_dim = self.encoder.output_dim();
        let in_dim = self.decoder.input_dim();
        let da = self.config.audio_dim;
        let rows: Vec<(Vec<f64>, EncodingTrace, Option<AttentionTrace>)> = means
            .par_iter()
            .map(|m| {
                let mut row = vec![0.0; in_dim];
                let enc = self.encoder.encode_into(m, &mut row[..enc_dim]);
                let att = self.attention.as_ref().map(|field| {
                    let t = field.evaluate(m);
                    for k in 0..da {
                        row[enc_dim + k] = t.values[k] * cond.audio[k];
                    }
                    for (k, e) in cond.expression.iter().enumerate() {
                        row[enc_dim + da + k] = t.values[da + k] * e;
                    }
                    t
                });
                if att.is_none() {
                    row[enc_dim..].copy_from_slice(&cond.audio);
                }
                (row, enc, att)
            })
            .collect();
        let n = means.len();
        let mut x = Array2::zeros((n, in_dim));
        let mut encodings = Vec::with_capacity(n);
        let mut attention = Vec::with_capacity(if self.attention.is_some() { n } else { 0 });
        for (i, (row, enc, att)) in rows.into_iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
            encodings.push(enc);
            attention.extend(att);
        }
        let (y, mlp) = self.decoder.forward(x)?;
        let deltas = y
            .rows()
            .into_iter()
            .map(|r| match self.kind {
                BranchTag::Face => DeformationDelta {
                    d_mean: [r[0], r[1], r[2]],
                    d_scale: [r[3], r[4], r[5]],
                    d_rotation: [r[6], r[7], r[8], r[9]],
                },
                BranchTag::Mouth => DeformationDelta::translation([r[0], r[1], r[2]]),
            })
            .collect();
        let trace = FieldTrace {
            encodings,
            attention,
            mlp,
            audio: cond.audio.clone(),
            expression: cond.expression.clone(),
        };
        Ok((deltas, trace))
    }

    /// Exact gradients of `Σ <d_deltas[i], δ_i>` with respect to every tensor and position.
    ///
    /// Mouth fields ignore the scale and rotation components of `d_deltas`.
    pub fn backward(&self, trace: &FieldTrace, d_deltas: &[DeformationDelta]) -> Result<FieldGrads> {
        let n = trace.len();
        if d_deltas.len() != n {
            return Err(Error::CountMismatch {
                what: "deformation gradients",
                expected: n,
                actual: d_deltas.len(),
            });
        }
        if self.attention.is_some() != !trace.attention.is_empty() && n > 0 {
            return Err(Error::MissingTrace("attention"));
        }
        let out_dim = self.decoder.output_dim();
        let d_out = Array2::from_shape_fn((n, out_dim), |(i, k)| {
            let d = &d_deltas[i];
            match k {
                0..=2 => d.d_mean[k],
                3..=5 => d.d_scale[k - 3],
                _ => d.d_rotation[k - 6],
            }
        });
        let mg = self.decoder.backward(&trace.mlp, &d_out);
        let enc_dim = self.encoder.output_dim();
        let da = self.config.audio_dim;
        let mut d_tables = vec![0.0; self.encoder.params.len()];
        let mut d_att = self.attention.as_ref().map(|a| vec![0.0; a.params.len()]);
        let mut positions = Vec::with_capacity(n);
        for i in 0..n {
            let dx = mg.input.row(i);
            let dx = dx.as_slice().expect("contiguous row");
            self.encoder.backward_tables(&trace.encodings[i], &dx[..enc_dim], &mut d_tables);
            let mut dp = self.encoder.backward_position(&trace.encodings[i], &dx[..enc_dim]);
            if let (Some(field), Some(grad)) = (&self.attention, d_att.as_mut()) {
                let mut dv = Vec::with_capacity(field.channels);
                dv.extend((0..da).map(|k| dx[enc_dim + k] * trace.audio[k]));
                dv.extend(trace.expression.iter().enumerate().map(|(k, e)| dx[enc_dim + da + k] * e));
                let da_pos = field.backward(&trace.attention[i], &dv, grad);
                for a in 0..3 {
                    dp[a] += da_pos[a];
                }
            }
            positions.push(dp);
        }
        let mut tensors = vec![d_tables];
        tensors.extend(d_att);
        for (w, b) in mg.weights.into_iter().zip(mg.biases) {
            tensors.push(w);
            tensors.push(b);
        }
        Ok(FieldGrads { tensors, positions })
    }

    pub fn face_deformation(&self, mu: &[f64; 3], audio: &[f64], expression: &[f64]) -> Result<DeformationDelta> {
        if self.kind != BranchTag::Face {
            return Err(Error::Invalid("face_deformation called on a mouth field".into()));
        }
        let cond = ConditionVector {
            audio: audio.to_vec(),
            expression: expression.to_vec(),
            metrics: BTreeMap::new(),
        };
        Ok(self.deform(std::slice::from_ref(mu), &cond)?.0[0])
    }

    pub fn mouth_deformation(&self, mu: &[f64; 3], audio: &[f64]) -> Result<DeformationDelta> {
        if self.kind != BranchTag::Mouth {
            return Err(Error::Invalid("mouth_deformation called on a face field".into()));
        }
        let cond = ConditionVector {
            audio: audio.to_vec(),
            ..Default::default()
        };
        Ok(self.deform(std::slice::from_ref(mu), &cond)?.0[0])
    }

    /// Writes `<stem>.json` and `<stem>.bin` inside `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob = format!("{stem}.bin");
        let manifest = FieldManifest {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            config: self.config,
            bounds: self.encoder.bounds,
            tensors: self
                .tensor_names()
                .into_iter()
                .zip(self.tensors())
                .map(|(name, t)| TensorEntry { name, len: t.len() })
                .collect(),
            blob: blob.clone(),
        };
        write_f32_le(&dir.join(&blob), self.tensors().into_iter().flatten().copied())?;
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: FieldManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::data(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        let mut field = Self::new(manifest.kind, manifest.config, manifest.bounds, 0);
        let expected: Vec<TensorEntry> = field
            .tensor_names()
            .into_iter()
            .zip(field.tensors())
            .map(|(name, t)| TensorEntry { name, len: t.len() })
            .collect();
        if expected != manifest.tensors {
            return Err(Error::data(&path, "tensor layout does not match the configuration"));
        }
        let blob_path = dir.join(&manifest.blob);
        let values = read_f32_le(&blob_path)?;
        let total: usize = expected.iter().map(|t| t.len).sum();
        if values.len() != total {
            return Err(Error::data(
                &blob_path,
                format!("expected {total} values, found {}", values.len()),
            ));
        }
        let mut rest = values.as_slice();
        for t in field.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
        Ok(field)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldManifest {
    format_version: u32,
    kind: BranchTag,
    config: FieldConfig,
    bounds: Bounds,
    tensors: Vec<TensorEntry>,
    blob: String,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}
