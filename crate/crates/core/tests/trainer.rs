use std::collections::BTreeMap;
use std::path::Path;

use gausshead::data::{generate_synthetic, Dataset, DatasetManifest, FrameRecord, SynthSceneSpec, FORMAT_VERSION};
use gausshead::fields::{Bounds, ConditionVector};
use gausshead::fusion::{fuse_head, render_branch};
use gausshead::losses::{loss_motion, loss_static, psnr, LossWeights};
use gausshead::model::{BranchTag, Camera, CanonicalField, GaussianPrimitive};
use gausshead::raster::{render_naive, RenderOptions};
use gausshead::trainer::{
    densify_and_prune, CanonicalOptimizer, DensifyConfig, DensifyStats, Stage, TrainConfig, TrainSchedule, Trainer,
};
use gausshead::{Error, Image};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_dataset(dir: &Path) -> Dataset {
    let spec = SynthSceneSpec {
        frames: 12,
        width: 32,
        height: 32,
        primitive_budget: 300,
        ..SynthSceneSpec::default()
    };
    generate_synthetic(&spec, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn small_config(iters: usize) -> TrainConfig {
    TrainConfig {
        seed: 3,
        face_primitives: 120,
        mouth_primitives: 40,
        face_max_primitives: 300,
        mouth_max_primitives: 100,
        schedule: TrainSchedule {
            static_iters: iters,
            motion_iters: iters,
            finetune_iters: iters,
            ..TrainSchedule::default()
        },
        densify: DensifyConfig {
            interval: 10,
            start: 0,
            ..DensifyConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn field_with(prims: Vec<GaussianPrimitive>) -> CanonicalField {
    let mut f = CanonicalField::new(0, BranchTag::Face).unwrap();
    for p in prims {
        f.push(p).unwrap();
    }
    f
}

fn blob(mean: [f64; 3], scale: f64, opacity: f64) -> GaussianPrimitive {
    let mut p = GaussianPrimitive::from_activated(mean, [scale; 3], [1.0, 0.0, 0.0, 0.0], opacity, vec![0.5; 3]);
    p.quantize();
    p
}

fn stats_with(grads: &[f64]) -> DensifyStats {
    let mut s = DensifyStats::new(grads.len());
    s.grad_sum.copy_from_slice(grads);
    s.count.fill(1);
    s
}

#[test]
fn densify_below_threshold_is_identity() {
    let mut field = field_with(vec![blob([0.0; 3], 0.1, 0.5), blob([1.0, 0.0, 0.0], 0.001, 0.9)]);
    let before = field.clone();
    let mut stats = stats_with(&[1e-5, 1e-4]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let report = densify_and_prune(&mut field, &mut stats, &DensifyConfig::default(), 1.0, None, &mut rng);
    assert_eq!(field, before);
    assert_eq!((report.cloned, report.split, report.pruned), (0, 0, 0));
}

#[test]
fn large_high_gradient_primitive_splits_into_two() {
    let parent = blob([0.0; 3], 0.2, 0.5);
    let mut field = field_with(vec![parent.clone(), blob([1.0, 0.0, 0.0], 0.2, 0.5)]);
    let mut stats = stats_with(&[1e-3, 0.0]);
    let mut opt = CanonicalOptimizer::new(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let report = densify_and_prune(&mut field, &mut stats, &DensifyConfig::default(), 1.0, Some(&mut opt), &mut rng);
    assert_eq!(report.split, 1);
    assert_eq!(field.len(), 3);
    assert_eq!(opt.rows(), 3);
    assert_eq!(stats.count.len(), 3);
    assert_eq!(field.primitives[0].mean, [1.0, 0.0, 0.0], "survivors keep their order");
    for child in &field.primitives[1..] {
        for (c, p) in child.scale().iter().zip(parent.scale()) {
            assert!((c - p / 1.6).abs() <= 1e-6 * p, "child {c} parent {p}");
        }
        assert_ne!(child.mean, parent.mean);
    }
}

#[test]
fn small_high_gradient_primitive_is_cloned_with_offset() {
    let parent = blob([0.0; 3], 0.001, 0.5);
    let mut field = field_with(vec![parent.clone()]);
    let mut stats = stats_with(&[1e-3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let report = densify_and_prune(&mut field, &mut stats, &DensifyConfig::default(), 1.0, None, &mut rng);
    assert_eq!(report.cloned, 1);
    assert_eq!(field.len(), 2);
    assert_eq!(field.primitives[0], parent);
    assert_eq!(field.primitives[1].scale_raw, parent.scale_raw);
    assert_ne!(field.primitives[1].mean, parent.mean);
}

#[test]
fn transparent_primitive_is_pruned() {
    let mut field = field_with(vec![blob([0.0; 3], 0.1, 0.001), blob([1.0, 0.0, 0.0], 0.1, 0.5)]);
    let mut stats = DensifyStats::new(2);
    let mut opt = CanonicalOptimizer::new(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let report = densify_and_prune(&mut field, &mut stats, &DensifyConfig::default(), 1.0, Some(&mut opt), &mut rng);
    assert_eq!(report.pruned, 1);
    assert_eq!(field.len(), 1);
    assert_eq!(opt.rows(), 1);
    assert_eq!(field.primitives[0].mean, [1.0, 0.0, 0.0]);
}

#[test]
fn densify_respects_primitive_cap() {
    let mut field = field_with((0..5).map(|i| blob([i as f64, 0.0, 0.0], 0.2, 0.5)).collect());
    let mut stats = stats_with(&[1e-3; 5]);
    let cfg = DensifyConfig { max_primitives: 7, ..DensifyConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    densify_and_prune(&mut field, &mut stats, &cfg, 1.0, None, &mut rng);
    assert_eq!(field.len(), 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pruning_keeps_every_opaque_primitive(
        opacities in prop::collection::vec(1e-4f64..0.999, 1..40),
        grads in prop::collection::vec(0.0f64..1e-3, 40),
        seed in 0u64..1000,
    ) {
        let cfg = DensifyConfig::default();
        let n = opacities.len();
        let prims: Vec<_> = opacities.iter().enumerate().map(|(i, &o)| blob([i as f64, 0.0, 0.0], 0.05, o)).collect();
        let mut field = field_with(prims.clone());
        let mut stats = stats_with(&grads[..n]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        densify_and_prune(&mut field, &mut stats, &cfg, 1.0, None, &mut rng);
        for p in &prims {
            if p.opacity() >= cfg.opacity_threshold {
                let kept = field.primitives.iter().any(|q| q == p)
                    || field.primitives.iter().filter(|q| q.opacity_raw == p.opacity_raw && q.sh == p.sh).count() >= 2;
                prop_assert!(kept, "opaque primitive removed");
            }
        }
        prop_assert!(field.primitives.iter().all(|p| p.opacity() >= cfg.opacity_threshold));
    }
}

#[test]
fn zero_iteration_stages_leave_model_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut trainer = Trainer::new(&data, small_config(10)).unwrap();
    let init = trainer.model.clone();
    trainer.stage_static_init(BranchTag::Face, 0).unwrap();
    trainer.stage_static_init(BranchTag::Mouth, 0).unwrap();
    trainer.stage_motion_learning(BranchTag::Face, 0).unwrap();
    trainer.stage_finetune(0).unwrap();
    assert_eq!(trainer.model, init);
    assert!(trainer.samples.is_empty());
}

#[test]
fn empty_training_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = small_dataset(dir.path());
    data.manifest.train.clear();
    let mut trainer = Trainer::new(&data, small_config(10)).unwrap();
    assert!(matches!(trainer.stage_static_init(BranchTag::Face, 5), Err(Error::Invalid(_))));
    assert!(trainer.stage_finetune(5).is_err());
}

#[test]
fn zero_stage_counts_are_rejected_by_full_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut cfg = small_config(10);
    cfg.schedule.motion_iters = 0;
    assert!(Trainer::new(&data, cfg).unwrap().run(None).is_err());
}

#[test]
fn first_motion_render_matches_static_render() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut trainer = Trainer::new(&data, small_config(30)).unwrap();
    trainer.stage_static_init(BranchTag::Face, 30).unwrap();
    let m = &trainer.model;
    let w = LossWeights::default();
    for frame in [0, 4, 7] {
        let cam = &data.cameras[frame];
        let cond = &data.conditions[frame];
        let s = render_branch(&m.face, &m.face_field, cam, cond, RenderOptions::default(), false).unwrap();
        let d = render_branch(&m.face, &m.face_field, cam, cond, RenderOptions::default(), true).unwrap();
        assert_eq!(s.output.color, d.output.color);
        let mask = Some(&data.masks_face[frame]);
        let ls = loss_static(&s.output.color, &data.face_targets[frame], mask, &w).unwrap().0;
        let ld = loss_motion(&d.output.color, &data.face_targets[frame], mask, &w).unwrap().0;
        assert_eq!(ls, ld);
    }
}

#[test]
fn finetune_freezes_every_non_color_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut trainer = Trainer::new(&data, small_config(20)).unwrap();
    trainer.run(Some(Stage::Static)).unwrap();
    trainer.run(Some(Stage::Motion)).unwrap();
    let before = trainer.model.clone();
    trainer.stage_finetune(20).unwrap();
    assert_eq!(
        trainer.model.non_color_snapshot().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        before.non_color_snapshot().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let colors = |m: &gausshead::fusion::HeadModel| m.face.primitives.iter().flat_map(|p| p.sh.clone()).collect::<Vec<_>>();
    assert_ne!(colors(&trainer.model), colors(&before), "colors must be trained");
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = || {
        let mut log = Vec::new();
        let mut t = Trainer::new(&data, small_config(15)).unwrap().with_log(&mut log);
        t.run(None).unwrap();
        let model = t.into_model();
        (model, log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.save(da.path()).unwrap();
    b.save(db.path()).unwrap();
    for f in ["face.bin", "mouth.bin", "face_field.bin", "mouth_field.bin"] {
        assert_eq!(std::fs::read(da.path().join(f)).unwrap(), std::fs::read(db.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn log_lines_carry_the_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let mut log = Vec::new();
    Trainer::new(&data, small_config(6)).unwrap().with_log(&mut log).run(None).unwrap();
    let text = String::from_utf8(log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6 * 2 + 6 * 2 + 6);
    for key in ["iter", "stage", "loss", "l1", "dssim", "perc", "n_primitives", "window_lo", "window_hi", "metric", "from_window"] {
        assert!(lines.iter().all(|l| l.get(key).is_some()), "missing {key}");
    }
    let motion_k0 = lines.iter().find(|l| l["stage"] == "motion" && l["k"] == 0).unwrap();
    assert_eq!(motion_k0["window_lo"], 0.0);
}

#[test]
fn disabling_sampling_changes_draws_only_on_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let iters = 60;
    let draws = |enabled: bool| {
        let mut cfg = small_config(iters);
        cfg.schedule.incremental_sampling = enabled;
        let mut t = Trainer::new(&data, cfg).unwrap();
        t.stage_motion_learning(BranchTag::Face, iters).unwrap();
        t.samples.iter().map(|s| s.frame).collect::<Vec<_>>()
    };
    let (on, off) = (draws(true), draws(false));
    let k_every = TrainSchedule::default().face_samplers[0].every;
    let mut differing = 0;
    for k in 0..iters {
        if on[k] != off[k] {
            assert_eq!(k % k_every, 0, "draw at k = {k} changed");
            differing += 1;
        }
    }
    assert!(differing > 0);
}

#[test]
fn sampled_frames_satisfy_window_membership() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let iters = 100;
    let mut t = Trainer::new(&data, small_config(iters)).unwrap();
    t.stage_motion_learning(BranchTag::Face, iters).unwrap();
    t.stage_motion_learning(BranchTag::Mouth, iters).unwrap();
    let schedule = TrainSchedule::default();
    let step = schedule.face_samplers[0].step_for(iters);
    let mut windowed = 0;
    for s in &t.samples {
        let Some((lo, hi)) = s.window else { continue };
        assert_eq!(lo, schedule.face_samplers[0].b_lower + s.k as f64 * step);
        assert_eq!(hi, schedule.face_samplers[0].b_upper + s.k as f64 * step);
        if s.from_window {
            let m = data.conditions[s.frame].metric(s.metric.as_deref().unwrap()).unwrap();
            assert!(m >= lo && m <= hi);
            windowed += 1;
        }
    }
    assert!(windowed > 0);
}

/// Single-frame dataset of three colored blobs, built in memory.
fn three_blob_dataset() -> Dataset {
    let (w, h) = (32, 32);
    let intrinsics = gausshead::model::Intrinsics { fx: 40.0, fy: 40.0, cx: 16.0, cy: 16.0, width: w, height: h, near: 0.01 };
    let camera = Camera::orbit(nalgebra::Vector3::zeros(), 3.0, 0.0, 0.0, &intrinsics).unwrap();
    let y00 = gausshead::model::sh::eval_raw(0, &[1.0, 1.0, 1.0], &[0.0, 0.0, 1.0])[0];
    let colored = |mean, s, c: [f64; 3]| {
        GaussianPrimitive::from_activated(mean, [s; 3], [1.0, 0.0, 0.0, 0.0], 0.9, c.iter().map(|v| v / y00).collect())
    };
    let scene = [
        colored([-0.6, 0.0, 0.0], 0.25, [0.9, 0.2, 0.1]),
        colored([0.5, -0.4, 0.2], 0.2, [0.1, 0.8, 0.2]),
        colored([0.3, 0.5, -0.2], 0.3, [0.2, 0.3, 0.9]),
    ];
    let frame = render_naive(&scene, 0, &camera, Some([0.0; 3])).unwrap().color;
    let bounds = Bounds { lo: [-1.0; 3], hi: [1.0; 3] };
    let metrics: BTreeMap<String, f64> = ["lips_opening", "blink", "teeth_visibility"].iter().map(|k| (k.to_string(), 0.0)).collect();
    Dataset {
        root: "memory".into(),
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            frame_count: 1,
            width: w,
            height: h,
            background: [0.0; 3],
            intrinsics,
            audio_dim: 2,
            expression_dim: 1,
            bounds,
            mouth_bounds: bounds,
            frames: vec![FrameRecord {
                frame: "frames/00000.png".into(),
                mask_face: "masks_face/00000.png".into(),
                mask_mouth: "masks_mouth/00000.png".into(),
                extrinsics: camera.extrinsics(),
            }],
            train: vec![0],
            test: vec![0],
        },
        face_targets: vec![frame.clone()],
        mouth_targets: vec![Image::zeros(w, h, 3)],
        frames: vec![frame],
        masks_face: vec![Image::filled(w, h, 1, 1.0)],
        masks_mouth: vec![Image::zeros(w, h, 1)],
        cameras: vec![camera],
        conditions: vec![ConditionVector { audio: vec![0.0; 2], expression: vec![0.0], metrics }],
    }
}

#[test]
fn static_stage_fits_three_blobs() {
    let data = three_blob_dataset();
    let cfg = TrainConfig {
        sh_degree: 0,
        face_primitives: 60,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&data, cfg).unwrap();
    t.stage_static_init(BranchTag::Face, 2000).unwrap();
    // The face is fitted as the front layer over the mouth target.
    let r = render_branch(&t.model.face, &t.model.face_field, &data.cameras[0], &data.conditions[0], RenderOptions::default(), false).unwrap();
    let fused = fuse_head(&r.output.color, &r.output.alpha, &data.mouth_targets[0]).unwrap();
    let p = psnr(&fused, &data.frames[0]).unwrap();
    println!("three-blob static PSNR {p:.2} dB");
    assert!(p >= 30.0, "PSNR {p}");
}

mod sampler {
    use gausshead::trainer::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_substitution() {
        let cfg = IncrementalSamplerConfig {
            b_upper: 0.1,
            step: Some(0.001),
            ..IncrementalSamplerConfig::ascending("m")
        };
        let (lo, hi) = cfg.window(100, 5000);
        assert!((lo - 0.1).abs() < 1e-15 && (hi - 0.2).abs() < 1e-15);
        let desc = IncrementalSamplerConfig { direction: Direction::Descending, ..cfg.clone() };
        let (lo, hi) = desc.window(0, 5000);
        assert!((lo - 0.9).abs() < 1e-15 && hi == 1.0);
    }

    #[test]
    fn membership_examples() {
        let m = [0.05, 0.15, 0.30];
        let all = [0, 1, 2];
        assert_eq!(eligible_frames(&m, &all, (0.1, 0.2)), vec![1]);
        assert_eq!(eligible_frames(&m, &all, (0.0, 0.1)), vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(incremental_sample(&m, &all, (0.1, 0.2), &mut rng), Some(1));
        assert_eq!(incremental_sample(&m, &all, (0.5, 0.6), &mut rng), None);
    }

    #[test]
    fn default_step_sweeps_unit_interval() {
        let cfg = IncrementalSamplerConfig::ascending("m");
        let t = cfg.step_for(1000);
        assert!((700.0 * t - 1.0).abs() < 1e-12);
        assert!(cfg.validate().is_ok());
        assert!(IncrementalSamplerConfig { every: 0, ..cfg.clone() }.validate().is_err());
        assert!(IncrementalSamplerConfig { b_lower: 0.3, ..cfg }.validate().is_err());
    }
}
