//! Three-stage optimization: static initialization, motion learning and
//! color fine-tuning of the fused head.

pub mod densify;
pub mod sampler;

use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use densify::{densify_and_prune, CanonicalOptimizer, CanonicalRates, DensifyConfig, DensifyReport, DensifyStats};
pub use sampler::{eligible_frames, incremental_sample, Direction, IncrementalSamplerConfig};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fields::{Bounds, FieldConfig, MotionField};
use crate::fusion::{fuse_head, fuse_head_backward, render_branch, FrameMetrics, HeadModel};
use crate::image::Image;
use crate::losses::{loss_finetune, loss_motion, loss_static, psnr_masked, LossBreakdown, LossWeights, PyramidPerceptual};
use crate::math::derive_seed;
use crate::model::{BranchTag, CanonicalField, DeformationDelta};
use crate::optim::{exponential_lr, Adam, AdamConfig};
use crate::raster::{render_backward, RenderOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Static,
    Motion,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Static => "static",
            Stage::Motion => "motion",
            Stage::Finetune => "finetune",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Static => 1,
            Stage::Motion => 2,
            Stage::Finetune => 3,
        }
    }
}

/// Face and mouth branches, or one face-type branch covering the whole head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    TwoBranch,
    SingleBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Position rates are multiplied by the scene extent.
    pub mean_init: f64,
    pub mean_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub tables: f64,
    pub attention: f64,
    pub decoder: f64,
    /// AdamW decay on decoder weight matrices.
    pub decoder_weight_decay: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean_init: 1.6e-4,
            mean_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            tables: 1e-3,
            attention: 1e-3,
            decoder: 1e-3,
            decoder_weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    /// Per branch.
    pub static_iters: usize,
    /// Per branch.
    pub motion_iters: usize,
    pub finetune_iters: usize,
    pub lr: LearningRates,
    pub loss: LossWeights,
    /// Alternated on successive sampling iterations; all share one cadence.
    pub face_samplers: Vec<IncrementalSamplerConfig>,
    pub mouth_samplers: Vec<IncrementalSamplerConfig>,
    pub incremental_sampling: bool,
    /// Weight of the mean face opacity over mouth-mask pixels.
    pub mouth_transparency: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            static_iters: 2000,
            motion_iters: 5000,
            finetune_iters: 1000,
            lr: LearningRates::default(),
            loss: LossWeights::default(),
            face_samplers: vec![
                IncrementalSamplerConfig::ascending("lips_opening"),
                IncrementalSamplerConfig::ascending("blink"),
            ],
            mouth_samplers: vec![IncrementalSamplerConfig::ascending("teeth_visibility")],
            incremental_sampling: true,
            mouth_transparency: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.static_iters == 0 || self.motion_iters == 0 || self.finetune_iters == 0 {
            return Err(Error::Invalid("stage iteration counts must be positive".into()));
        }
        self.loss.validate()?;
        if !(self.mouth_transparency >= 0.0 && self.mouth_transparency.is_finite()) {
            return Err(Error::Invalid("mouth_transparency must be finite and non-negative".into()));
        }
        for set in [&self.face_samplers, &self.mouth_samplers] {
            for s in set.iter() {
                s.validate()?;
            }
            if set.iter().any(|s| s.every != set[0].every) {
                return Err(Error::Invalid("samplers of one branch must share the cadence K".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: BranchMode,
    pub sh_degree: usize,
    pub face_primitives: usize,
    pub mouth_primitives: usize,
    pub init_opacity: f64,
    /// Densification caps per branch; a single branch gets their sum.
    pub face_max_primitives: usize,
    pub mouth_max_primitives: usize,
    pub schedule: TrainSchedule,
    /// Audio and expression widths are taken from the dataset.
    pub field: FieldConfig,
    pub densify: DensifyConfig,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: BranchMode::TwoBranch,
            sh_degree: 1,
            face_primitives: 500,
            mouth_primitives: 150,
            init_opacity: 0.1,
            face_max_primitives: 1500,
            mouth_max_primitives: 500,
            schedule: TrainSchedule::default(),
            field: FieldConfig::default(),
            densify: DensifyConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.densify.validate()?;
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return Err(Error::Invalid("init_opacity must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn branches(&self) -> &'static [BranchTag] {
        match self.mode {
            BranchMode::TwoBranch => &[BranchTag::Face, BranchTag::Mouth],
            BranchMode::SingleBranch => &[BranchTag::Face],
        }
    }

    pub fn max_primitives(&self, b: BranchTag) -> usize {
        match (self.mode, b) {
            (BranchMode::SingleBranch, _) => self.face_max_primitives + self.mouth_max_primitives,
            (BranchMode::TwoBranch, BranchTag::Face) => self.face_max_primitives,
            (BranchMode::TwoBranch, BranchTag::Mouth) => self.mouth_max_primitives,
        }
    }

    /// Per-branch iterations of a stage; a single branch gets both branches' budget.
    pub fn budget(&self, stage: Stage) -> usize {
        let s = &self.schedule;
        let per_branch = match stage {
            Stage::Static => s.static_iters,
            Stage::Motion => s.motion_iters,
            Stage::Finetune => return s.finetune_iters,
        };
        match self.mode {
            BranchMode::TwoBranch => per_branch,
            BranchMode::SingleBranch => 2 * per_branch,
        }
    }
}

/// Initial model: uniformly placed canonical primitives and zero-output motion fields.
pub fn init_model(dataset: &Dataset, config: &TrainConfig) -> Result<HeadModel> {
    let m = &dataset.manifest;
    let field_cfg = FieldConfig {
        audio_dim: m.audio_dim,
        expression_dim: m.expression_dim,
        ..config.field
    };
    let (face_bounds, face_count, mouth_count) = match config.mode {
        BranchMode::TwoBranch => (m.bounds, config.face_primitives, config.mouth_primitives),
        BranchMode::SingleBranch => (
            Bounds {
                lo: std::array::from_fn(|a| m.bounds.lo[a].min(m.mouth_bounds.lo[a])),
                hi: std::array::from_fn(|a| m.bounds.hi[a].max(m.mouth_bounds.hi[a])),
            },
            config.face_primitives + config.mouth_primitives,
            0,
        ),
    };
    let seed = config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10]));
    let face = CanonicalField::init_uniform(config.sh_degree, BranchTag::Face, face_count, face_bounds.lo, face_bounds.hi, config.init_opacity, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[11]));
    let mouth = CanonicalField::init_uniform(
        config.sh_degree,
        BranchTag::Mouth,
        mouth_count,
        m.mouth_bounds.lo,
        m.mouth_bounds.hi,
        config.init_opacity,
        &mut rng,
    )?;
    Ok(HeadModel {
        sh_degree: config.sh_degree,
        background: m.background,
        face,
        mouth,
        face_field: MotionField::new(BranchTag::Face, field_cfg, face_bounds, derive_seed(seed, &[12])),
        mouth_field: MotionField::new(BranchTag::Mouth, field_cfg, m.mouth_bounds, derive_seed(seed, &[13])),
    })
}

/// One frame draw; `window` is set on incremental-sampling iterations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRecord {
    pub stage: Stage,
    pub branch: BranchTag,
    pub k: usize,
    pub frame: usize,
    pub metric: Option<String>,
    pub window: Option<(f64, f64)>,
    /// False when the window was empty and the draw fell back to uniform.
    pub from_window: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub branch: Option<BranchTag>,
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub n_primitives: usize,
    pub densify: DensifyReport,
}

struct BranchState {
    optimizer: CanonicalOptimizer,
    stats: DensifyStats,
    field_optimizers: Vec<Adam>,
}

impl BranchState {
    fn new(canonical: &CanonicalField, field: &MotionField, lr: &LearningRates) -> Self {
        let field_optimizers = field
            .tensor_names()
            .iter()
            .zip(field.tensors())
            .map(|(name, t)| {
                let weight_decay = if MotionField::is_decoder_weight(name) { lr.decoder_weight_decay } else { 0.0 };
                Adam::new(t.len(), AdamConfig { weight_decay, ..AdamConfig::default() })
            })
            .collect();
        Self {
            optimizer: CanonicalOptimizer::new(canonical.len(), crate::model::sh::coeff_count(canonical.sh_degree)),
            stats: DensifyStats::new(canonical.len()),
            field_optimizers,
        }
    }
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    pub config: TrainConfig,
    pub model: HeadModel,
    /// Every frame draw of the static and motion stages, in order.
    pub samples: Vec<SampleRecord>,
    log: Option<Box<dyn Write + Send + 'a>>,
    checkpoint_dir: Option<PathBuf>,
    states: [Option<BranchState>; 2],
    perceptual: PyramidPerceptual,
    extent: f64,
    iterations_run: usize,
}

fn branch_slot(b: BranchTag) -> usize {
    match b {
        BranchTag::Face => 0,
        BranchTag::Mouth => 1,
    }
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let model = init_model(dataset, &config)?;
        Self::with_model(dataset, config, model)
    }

    /// Continues from an existing model; optimizer moments start at zero.
    pub fn with_model(dataset: &'a Dataset, config: TrainConfig, model: HeadModel) -> Result<Self> {
        config.densify.validate()?;
        config.schedule.loss.validate()?;
        if model.face_field.config.audio_dim != dataset.manifest.audio_dim
            || model.face_field.config.expression_dim != dataset.manifest.expression_dim
        {
            return Err(Error::Invalid("model condition widths differ from the dataset".into()));
        }
        let b = &dataset.manifest.bounds;
        let extent = 0.5 * (0..3).map(|a| b.extent(a).powi(2)).sum::<f64>().sqrt();
        Ok(Self {
            dataset,
            config,
            model,
            samples: Vec::new(),
            log: None,
            checkpoint_dir: None,
            states: [None, None],
            perceptual: PyramidPerceptual::default(),
            extent,
            iterations_run: 0,
        })
    }

    /// Line-delimited JSON log of every iteration.
    pub fn with_log(mut self, sink: impl Write + Send + 'a) -> Self {
        self.log = Some(Box::new(sink));
        self
    }

    /// Directory receiving `iter_NNNNNN` checkpoints when `checkpoint_every > 0`.
    pub fn with_checkpoint_dir(mut self, dir: PathBuf) -> Self {
        self.checkpoint_dir = Some(dir);
        self
    }

    pub fn into_model(self) -> HeadModel {
        self.model
    }

    /// Runs the selected stages (`None` runs all three) for every active branch.
    pub fn run(&mut self, only: Option<Stage>) -> Result<Vec<StageSummary>> {
        self.config.validate()?;
        let mut out = Vec::new();
        let wants = |s: Stage| only.is_none_or(|o| o == s);
        if wants(Stage::Static) {
            for &b in self.config.branches() {
                out.push(self.stage_static_init(b, self.config.budget(Stage::Static))?);
            }
        }
        if wants(Stage::Motion) {
            for &b in self.config.branches() {
                out.push(self.stage_motion_learning(b, self.config.budget(Stage::Motion))?);
            }
        }
        if wants(Stage::Finetune) {
            out.push(self.stage_finetune(self.config.budget(Stage::Finetune))?);
        }
        if let Some(log) = self.log.as_mut() {
            log.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(out)
    }

    fn check_train_split(&self) -> Result<&'a [usize]> {
        let train = &self.dataset.manifest.train[..];
        if train.is_empty() {
            return Err(Error::Invalid("the training split is empty".into()));
        }
        Ok(train)
    }

    fn single(&self) -> bool {
        self.config.mode == BranchMode::SingleBranch
    }

    /// Target, loss mask and render options of a branch.
    fn branch_target(&self, b: BranchTag, frame: usize) -> (&'a Image, Option<&'a Image>, RenderOptions) {
        let d = self.dataset;
        if self.single() {
            return (&d.frames[frame], None, RenderOptions::with_background(self.model.background));
        }
        match b {
            BranchTag::Face => (&d.face_targets[frame], Some(&d.masks_face[frame]), RenderOptions::default()),
            BranchTag::Mouth => (
                &d.mouth_targets[frame],
                Some(&d.masks_mouth[frame]),
                RenderOptions::with_background(self.model.background),
            ),
        }
    }

    /// Training frames whose branch mask is non-empty (all of them if none is).
    fn candidates(&self, b: BranchTag) -> Result<Vec<usize>> {
        let train = self.check_train_split()?;
        if self.single() {
            return Ok(train.to_vec());
        }
        let masks = match b {
            BranchTag::Face => &self.dataset.masks_face,
            BranchTag::Mouth => &self.dataset.masks_mouth,
        };
        let c: Vec<usize> = train.iter().copied().filter(|&i| masks[i].data.iter().any(|&v| v > 0.0)).collect();
        Ok(if c.is_empty() { train.to_vec() } else { c })
    }

    fn state(&mut self, b: BranchTag) -> &mut BranchState {
        let slot = branch_slot(b);
        let (canonical, field) = match b {
            BranchTag::Face => (&self.model.face, &self.model.face_field),
            BranchTag::Mouth => (&self.model.mouth, &self.model.mouth_field),
        };
        let stale = self.states[slot].as_ref().is_none_or(|s| s.optimizer.rows() != canonical.len());
        if stale {
            self.states[slot] = Some(BranchState::new(canonical, field, &self.config.schedule.lr));
        }
        self.states[slot].as_mut().expect("state initialized")
    }

    fn densify_stop(&self) -> usize {
        self.config.densify.stop.unwrap_or(
            self.config.budget(Stage::Static) + (0.6 * self.config.budget(Stage::Motion) as f64).round() as usize,
        )
    }

    fn canonical_rates(&self, t: f64) -> CanonicalRates {
        let lr = &self.config.schedule.lr;
        CanonicalRates {
            mean: exponential_lr(lr.mean_init * self.extent, lr.mean_final * self.extent, t),
            scale: lr.scale,
            rotation: lr.rotation,
            opacity: lr.opacity,
            sh_dc: lr.sh_dc,
            sh_rest: lr.sh_rest,
        }
    }

    fn draw_rng(&self, stage: Stage, b: BranchTag, k: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[stage.tag(), branch_slot(b) as u64, k as u64]))
    }

    /// Frame for motion iteration `k`: windowed every K iterations, uniform otherwise.
    fn draw_motion_frame(&self, b: BranchTag, k: usize, iters: usize, candidates: &[usize]) -> Result<SampleRecord> {
        let mut rng = self.draw_rng(Stage::Motion, b, k);
        let samplers = match b {
            BranchTag::Face => &self.config.schedule.face_samplers,
            BranchTag::Mouth => &self.config.schedule.mouth_samplers,
        };
        let mut rec = SampleRecord {
            stage: Stage::Motion,
            branch: b,
            k,
            frame: 0,
            metric: None,
            window: None,
            from_window: false,
        };
        if self.config.schedule.incremental_sampling && !samplers.is_empty() && samplers[0].is_active(k) {
            let s = &samplers[(k / samplers[0].every) % samplers.len()];
            let metrics = self
                .dataset
                .conditions
                .iter()
                .map(|c| c.metric(&s.metric))
                .collect::<Result<Vec<f64>>>()?;
            let window = s.window(k, iters);
            rec.metric = Some(s.metric.clone());
            rec.window = Some(window);
            if let Some(f) = incremental_sample(&metrics, candidates, window, &mut rng) {
                rec.frame = f;
                rec.from_window = true;
                return Ok(rec);
            }
        }
        rec.frame = candidates[rng.random_range(0..candidates.len())];
        Ok(rec)
    }

    /// Optimizes the canonical field of `branch` on its masked targets.
    pub fn stage_static_init(&mut self, branch: BranchTag, iters: usize) -> Result<StageSummary> {
        self.branch_stage(Stage::Static, branch, iters)
    }

    /// Jointly optimizes the canonical field and motion field of `branch`.
    pub fn stage_motion_learning(&mut self, branch: BranchTag, iters: usize) -> Result<StageSummary> {
        self.branch_stage(Stage::Motion, branch, iters)
    }

    fn branch_stage(&mut self, stage: Stage, b: BranchTag, iters: usize) -> Result<StageSummary> {
        let candidates = self.candidates(b)?;
        let offset = if stage == Stage::Motion { self.config.budget(Stage::Static) } else { 0 };
        let mut summary = StageSummary {
            stage,
            branch: Some(b),
            iterations: iters,
            final_loss: None,
            n_primitives: 0,
            densify: DensifyReport::default(),
        };
        for k in 0..iters {
            let rec = match stage {
                Stage::Motion => self.draw_motion_frame(b, k, iters, &candidates)?,
                _ => {
                    let mut rng = self.draw_rng(stage, b, k);
                    SampleRecord {
                        stage,
                        branch: b,
                        k,
                        frame: candidates[rng.random_range(0..candidates.len())],
                        metric: None,
                        window: None,
                        from_window: false,
                    }
                }
            };
            let loss = self.branch_step(stage, b, rec.frame, k as f64 / iters as f64)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { stage: stage.name(), iteration: k, loss: loss.total });
            }
            let global = offset + k;
            let d = &self.config.densify;
            if global >= d.start && global < self.densify_stop() && (global + 1) % d.interval == 0 {
                let report = self.densify(b, global);
                summary.densify.cloned += report.cloned;
                summary.densify.split += report.split;
                summary.densify.pruned += report.pruned;
            }
            summary.final_loss = Some(loss.total);
            self.log_line(stage, Some(b), k, &loss, Some(&rec), rec.frame)?;
            self.samples.push(rec);
            self.after_iteration()?;
        }
        summary.n_primitives = self.canonical(b).len();
        Ok(summary)
    }

    fn canonical(&self, b: BranchTag) -> &CanonicalField {
        match b {
            BranchTag::Face => &self.model.face,
            BranchTag::Mouth => &self.model.mouth,
        }
    }

    fn densify(&mut self, b: BranchTag, global: usize) -> DensifyReport {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[4, branch_slot(b) as u64, global as u64]));
        let cfg = DensifyConfig {
            max_primitives: self.config.max_primitives(b),
            ..self.config.densify.clone()
        };
        let extent = self.extent;
        self.state(b);
        let state = self.states[branch_slot(b)].as_mut().expect("state initialized");
        let canonical = match b {
            BranchTag::Face => &mut self.model.face,
            BranchTag::Mouth => &mut self.model.mouth,
        };
        densify_and_prune(canonical, &mut state.stats, &cfg, extent, Some(&mut state.optimizer), &mut rng)
    }

    /// Forward, backward and update on one frame; returns the loss before the update.
    fn branch_step(&mut self, stage: Stage, b: BranchTag, frame: usize, t: f64) -> Result<LossBreakdown> {
        let (target, mask, options) = self.branch_target(b, frame);
        let deform = stage == Stage::Motion;
        let camera = &self.dataset.cameras[frame];
        let cond = &self.dataset.conditions[frame];
        let rates = self.canonical_rates(t);
        let lr = self.config.schedule.lr.clone();
        let weights = self.config.schedule.loss;
        let single = self.single();
        let mouth_transparency = self.config.schedule.mouth_transparency;
        let (w, h) = (camera.width, camera.height);
        self.state(b);
        let state = self.states[branch_slot(b)].as_mut().expect("state initialized");
        let (canonical, field) = match b {
            BranchTag::Face => (&mut self.model.face, &mut self.model.face_field),
            BranchTag::Mouth => (&mut self.model.mouth, &mut self.model.mouth_field),
        };

        let render = render_branch(canonical, field, camera, cond, options, deform)?;
        let branch_loss = |img: &Image, target: &Image, mask: Option<&Image>| match stage {
            Stage::Motion => loss_motion(img, target, mask, &weights),
            _ => loss_static(img, target, mask, &weights),
        };
        // The face is judged as the front layer over the masked mouth target,
        // and its opacity inside the mouth mask is penalized so the mouth
        // branch, not the face, explains the mouth interior.
        let (loss, d_color, d_alpha) = if b == BranchTag::Face && !single {
            let mouth_target = &self.dataset.mouth_targets[frame];
            let out = &render.output;
            let fused = fuse_head(&out.color, &out.alpha, mouth_target)?;
            let (mut loss, d_fused) = branch_loss(&fused, &self.dataset.frames[frame], None)?;
            let mut g = fuse_head_backward(&out.color, &out.alpha, mouth_target, &d_fused)?;
            let mouth_mask = &self.dataset.masks_mouth[frame];
            let n = mouth_mask.data.iter().filter(|&&m| m > 0.0).count();
            if n > 0 && mouth_transparency > 0.0 {
                let w = mouth_transparency / n as f64;
                for (p, &m) in mouth_mask.data.iter().enumerate() {
                    if m > 0.0 {
                        loss.total += w * out.alpha.data[p];
                        g.a_face.data[p] += w;
                    }
                }
            }
            (loss, g.c_face, Some(g.a_face))
        } else {
            let (loss, d_color) = branch_loss(&render.output.color, target, mask)?;
            (loss, d_color, None)
        };
        if !loss.total.is_finite() {
            return Ok(loss);
        }
        let grads = render_backward(&render.primitives, &render.output, &d_color, d_alpha.as_ref())?;
        let mut params = grads.params.clone();
        if let Some(trace) = &render.trace {
            let d_deltas: Vec<DeformationDelta> = (0..params.len())
                .map(|i| DeformationDelta {
                    d_mean: params.mean[i],
                    d_scale: params.scale_raw[i],
                    d_rotation: params.rotation[i],
                })
                .collect();
            let fg = field.backward(trace, &d_deltas)?;
            for (m, p) in params.mean.iter_mut().zip(&fg.positions) {
                for a in 0..3 {
                    m[a] += p[a];
                }
            }
            let names = field.tensor_names();
            for (((name, tensor), g), opt) in names.iter().zip(field.tensors_mut()).zip(&fg.tensors).zip(&mut state.field_optimizers) {
                let rate = if name == "tables" {
                    lr.tables
                } else if name == "attention" {
                    lr.attention
                } else {
                    lr.decoder
                };
                opt.step(tensor, g, rate)?;
            }
        }
        state.optimizer.step(canonical, &params, &rates, false)?;
        state.stats.accumulate(&grads, w, h);
        Ok(loss)
    }

    /// Updates only the color coefficients of both branches on fused full frames.
    pub fn stage_finetune(&mut self, iters: usize) -> Result<StageSummary> {
        let train = self.check_train_split()?;
        let weights = self.config.schedule.loss;
        let rates = self.canonical_rates(1.0);
        let mut summary = StageSummary {
            stage: Stage::Finetune,
            branch: None,
            iterations: iters,
            final_loss: None,
            n_primitives: self.model.face.len() + self.model.mouth.len(),
            densify: DensifyReport::default(),
        };
        for k in 0..iters {
            let mut rng = self.draw_rng(Stage::Finetune, BranchTag::Face, k);
            let frame = train[rng.random_range(0..train.len())];
            let camera = &self.dataset.cameras[frame];
            let fr = self.model.render_frame(camera, &self.dataset.conditions[frame])?;
            let (loss, d_head) = loss_finetune(&fr.head, &self.dataset.frames[frame], &weights, &self.perceptual)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { stage: Stage::Finetune.name(), iteration: k, loss: loss.total });
            }
            let fg = fuse_head_backward(&fr.face.output.color, &fr.face.output.alpha, &fr.mouth.output.color, &d_head)?;
            let g_face = render_backward(&fr.face.primitives, &fr.face.output, &fg.c_face, Some(&fg.a_face))?;
            let g_mouth = render_backward(&fr.mouth.primitives, &fr.mouth.output, &fg.c_mouth, None)?;
            self.state(BranchTag::Face);
            self.state(BranchTag::Mouth);
            let [face_state, mouth_state] = &mut self.states;
            let (fs, ms) = (face_state.as_mut().expect("state"), mouth_state.as_mut().expect("state"));
            fs.optimizer.step(&mut self.model.face, &g_face.params, &rates, true)?;
            ms.optimizer.step(&mut self.model.mouth, &g_mouth.params, &rates, true)?;
            summary.final_loss = Some(loss.total);
            self.log_line(Stage::Finetune, None, k, &loss, None, frame)?;
            self.after_iteration()?;
        }
        Ok(summary)
    }

    fn log_line(&mut self, stage: Stage, b: Option<BranchTag>, k: usize, loss: &LossBreakdown, sample: Option<&SampleRecord>, frame: usize) -> Result<()> {
        let window = sample.and_then(|s| s.window);
        let n_primitives = self.model.face.len() + self.model.mouth.len();
        let iter = self.iterations_run;
        let Some(log) = self.log.as_mut() else { return Ok(()) };
        let line = serde_json::json!({
            "iter": iter,
            "stage": stage.name(),
            "branch": b.map(|b| b.name()),
            "k": k,
            "frame": frame,
            "loss": loss.total,
            "l1": loss.l1,
            "dssim": loss.dssim,
            "perc": loss.perceptual,
            "n_primitives": n_primitives,
            "window_lo": window.map(|w| w.0),
            "window_hi": window.map(|w| w.1),
            "metric": sample.and_then(|s| s.metric.as_deref()),
            "from_window": sample.is_some_and(|s| s.from_window),
        });
        writeln!(log, "{line}").map_err(|e| Error::io("training log", e))
    }

    fn after_iteration(&mut self) -> Result<()> {
        self.iterations_run += 1;
        let every = self.config.checkpoint_every;
        if let (Some(dir), true) = (&self.checkpoint_dir, every > 0 && self.iterations_run % every == 0) {
            self.model.save(&dir.join(format!("iter_{:06}", self.iterations_run)))?;
        }
        Ok(())
    }
}

/// Per-frame metrics of the fused render on a split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: Vec<FrameMetrics>,
    /// PSNR restricted to mouth-mask pixels, for frames with a non-empty mask.
    pub mouth_psnr: Vec<(usize, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_mouth_psnr: Option<f64>,
}

pub fn evaluate(model: &HeadModel, dataset: &Dataset, split: &str) -> Result<EvalReport> {
    let indices = dataset.split(split)?;
    if indices.is_empty() {
        return Err(Error::Invalid(format!("split `{split}` is empty")));
    }
    let cameras: Vec<_> = indices.iter().map(|&i| dataset.cameras[i].clone()).collect();
    let conds: Vec<_> = indices.iter().map(|&i| dataset.conditions[i].clone()).collect();
    let targets: Vec<Image> = indices.iter().map(|&i| dataset.frames[i].clone()).collect();
    let rendered = model.render_sequence(&cameras, &conds, Some(&targets))?;
    let mut frames = Vec::with_capacity(indices.len());
    let mut mouth_psnr = Vec::new();
    for ((img, m), &i) in rendered.iter().zip(indices) {
        let mut m = m.expect("targets were given");
        m.frame = i;
        frames.push(m);
        if let Some(p) = psnr_masked(img, &dataset.frames[i], &dataset.masks_mouth[i])? {
            mouth_psnr.push((i, p));
        }
    }
    let n = frames.len() as f64;
    Ok(EvalReport {
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        mean_mouth_psnr: (!mouth_psnr.is_empty()).then(|| mouth_psnr.iter().map(|p| p.1).sum::<f64>() / mouth_psnr.len() as f64),
        frames,
        mouth_psnr,
    })
}
