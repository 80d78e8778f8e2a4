use std::fs;
use std::path::Path;

use gausshead::data::{generate_synthetic, pose_track, Dataset, SynthSceneSpec, Track};
use gausshead::{Error, Image};

fn small_spec() -> SynthSceneSpec {
    SynthSceneSpec {
        frames: 8,
        width: 32,
        height: 32,
        primitive_budget: 250,
        ..SynthSceneSpec::default()
    }
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_deterministic_and_loads() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = small_spec();
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let d = Dataset::load(a.path()).unwrap();
    assert_eq!(d.len(), 8);
    assert_eq!(d.manifest.test, vec![5]);
    assert_eq!(d.conditions[0].audio.len(), 16);
    assert_eq!(d.conditions[0].expression.len(), 7);
    for i in 0..d.len() {
        for p in 0..32 * 32 {
            let (f, m) = (d.masks_face[i].data[p], d.masks_mouth[i].data[p]);
            assert_eq!(f + m, 1.0, "masks must partition the frame");
            if m == 1.0 {
                let lum: f64 = (0..3).map(|c| d.frames[i].data[p * 3 + c]).sum();
                assert!(lum > 0.0, "mouth pixels are ground-truth occupied");
            }
        }
        for (t, (fr, mk)) in d.face_targets[i].data.iter().zip(d.frames[i].data.iter().zip(d.masks_face[i].data.iter().flat_map(|m| [*m; 3]))) {
            assert_eq!(*t, fr * mk);
        }
    }
}

#[test]
fn jaw_metric_is_normalized_analytic_jaw() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    generate_synthetic(&spec, dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    let jaw: Vec<f64> = pose_track(&spec).iter().map(|p| p.jaw).collect();
    let (lo, hi) = jaw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    for (i, c) in d.conditions.iter().enumerate() {
        assert_eq!(c.metric("lips_opening").unwrap(), (jaw[i] - lo) / (hi - lo));
        let m = c.metric("teeth_visibility").unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
}

#[test]
fn zero_amplitude_gives_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSceneSpec {
        jaw_amplitude: 0.0,
        blink_amplitude: 0.0,
        yaw_amplitude: 0.0,
        ..small_spec()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    for f in &d.frames[1..] {
        assert_eq!(f, &d.frames[0]);
    }
}

#[test]
fn loader_reports_missing_and_invalid_files() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();

    let missing = dir.path().join("frames/00003.png");
    let saved = fs::read(&missing).unwrap();
    fs::remove_file(&missing).unwrap();
    match Dataset::load(dir.path()) {
        Err(e @ Error::Data { .. }) => assert!(e.to_string().contains("00003.png"), "{e}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    fs::write(&missing, saved).unwrap();

    let mask_path = dir.path().join("masks_face/00002.png");
    let mut mask = Image::load_png(&mask_path).unwrap();
    mask.data[17] = 128.0 / 255.0;
    mask.save_png(&mask_path).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("00002.png") && err.to_string().contains("binary"), "{err}");
}

#[test]
fn track_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&small_spec(), dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    let track = d.track(&d.manifest.test);
    let path = dir.path().join("track.json");
    track.save(&path).unwrap();
    let back = Track::load(&path).unwrap();
    assert_eq!(back, track);
    assert_eq!(back.cameras().unwrap().len(), 1);

    let empty = Track { intrinsics: track.intrinsics, frames: vec![] };
    empty.save(&path).unwrap();
    assert!(Track::load(&path).is_err());
}

#[test]
fn invalid_spec_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSceneSpec { frames: 0, ..small_spec() };
    assert!(generate_synthetic(&spec, dir.path()).is_err());
}
