use gausshead::math::to_f32_grid;
use gausshead::optim::*;

#[test]
fn zero_gradient_leaves_parameters() {
    let mut adam = Adam::new(3, AdamConfig::default());
    let mut p = vec![0.5, -1.25, 3.0];
    adam.step(&mut p, &[0.0; 3], 0.1).unwrap();
    assert_eq!(p, vec![0.5, -1.25, 3.0]);
}

#[test]
fn quadratic_converges() {
    let mut adam = Adam::new(1, AdamConfig::default());
    let mut x = vec![-2.0];
    let steps = 500;
    for k in 0..steps {
        let g = 2.0 * (x[0] - 3.0);
        adam.step(&mut x, &[g], exponential_lr(1.0, 1e-3, k as f64 / steps as f64)).unwrap();
    }
    assert!((x[0] - 3.0).abs() <= 1e-6, "{}", x[0]);
}

#[test]
fn weight_decay_shrinks_without_gradient() {
    let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
    let mut adam = Adam::new(1, cfg);
    let mut p = vec![1.0];
    adam.step(&mut p, &[0.0], 0.5).unwrap();
    assert_eq!(p[0], to_f32_grid(0.95));
}

#[test]
fn row_edits_keep_alignment() {
    let mut adam = Adam::new(6, AdamConfig::default());
    let mut p = vec![0.0; 6];
    adam.step(&mut p, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0], 0.1).unwrap();
    let before = adam.clone();
    adam.retain_rows(&[true, false, true], 2);
    adam.push_zero_rows(1, 2);
    assert_eq!(adam.len(), 6);
    let (m, before_m) = (adam.moments().0, before.moments().0);
    assert_eq!(m[..2], before_m[..2]);
    assert_eq!(m[2..4], before_m[4..6]);
    assert_eq!(m[4..], [0.0, 0.0]);
    assert!(adam.step(&mut [0.0; 4], &[0.0; 4], 0.1).is_err());
}

#[test]
fn lr_schedule_endpoints() {
    assert!((exponential_lr(1.6e-4, 1.6e-6, 0.0) - 1.6e-4).abs() < 1e-18);
    assert!((exponential_lr(1.6e-4, 1.6e-6, 1.0) - 1.6e-6).abs() < 1e-18);
    assert!((exponential_lr(1e-2, 1e-4, 0.5) - 1e-3).abs() < 1e-15);
}
