use gausshead::image::Image;
use gausshead::model::{Camera, GaussianPrimitive, Intrinsics};
use gausshead::raster::{render_backward, render_forward, render_naive, RenderOptions};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(size: usize) -> Camera {
    let intr = Intrinsics {
        fx: 1.2 * size as f64,
        fy: 1.2 * size as f64,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        near: 0.2,
    };
    Camera::orbit(Vector3::zeros(), 4.0, 0.15, -0.1, &intr).unwrap()
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, sh_degree: usize) -> Vec<GaussianPrimitive> {
    let z = 3 * (sh_degree + 1) * (sh_degree + 1);
    (0..n)
        .map(|_| {
            let mut sh: Vec<f64> = (0..z).map(|_| 0.3 * (rng.random::<f64>() - 0.5)).collect();
            for c in 0..3 {
                sh[c] = 1.0 + 2.0 * rng.random::<f64>();
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

#[test]
fn empty_scene_is_black_and_transparent() {
    let out = render_naive(&[], 1, &camera(32), None).unwrap();
    assert!(out.color.data.iter().all(|&v| v == 0.0));
    assert!(out.alpha.data.iter().all(|&v| v == 0.0));
}

#[test]
fn single_opaque_gaussian_at_pixel_center() {
    // 3DGS convention: pixel (i, j) is sampled at (i + 0.5, j + 0.5); the
    // principal point is at (16, 16), so a point on the axis hits a pixel
    // corner. Offset the camera principal point by half a pixel instead.
    let mut cam = camera(32);
    cam.cx = 16.5;
    cam.cy = 16.5;
    cam.rotation = nalgebra::Matrix3::identity();
    cam.translation = Vector3::new(0.0, 0.0, 4.0);
    let color = [0.2, 0.5, 0.9];
    let y00 = 0.282_094_791_773_878_14;
    let mut p = GaussianPrimitive::from_activated([0.0; 3], [0.05; 3], [1.0, 0.0, 0.0, 0.0], 0.5, color.map(|c| c / y00).to_vec());
    p.opacity_raw = 40.0;
    let out = render_forward(&[p.clone()], 0, &cam, RenderOptions::default()).unwrap();
    assert_eq!(out.alpha.get(16, 16, 0), 1.0);
    for c in 0..3 {
        assert!((out.color.get(16, 16, c) - color[c]).abs() < 1e-15);
    }
    let naive = render_naive(&[p], 0, &cam, None).unwrap();
    assert_eq!(naive.color, out.color);
    assert_eq!(naive.alpha, out.alpha);
}

#[test]
fn two_half_transparent_contributors() {
    let mut cam = camera(32);
    cam.cx = 16.5;
    cam.cy = 16.5;
    cam.rotation = nalgebra::Matrix3::identity();
    cam.translation = Vector3::new(0.0, 0.0, 4.0);
    let y00 = 0.282_094_791_773_878_14;
    let c1 = [1.0, 0.0, 0.2];
    let c2 = [0.0, 1.0, 0.6];
    let front = GaussianPrimitive::from_activated([0.0, 0.0, -1.0], [0.05; 3], [1.0, 0.0, 0.0, 0.0], 0.5, c1.map(|c| c / y00).to_vec());
    let back = GaussianPrimitive::from_activated([0.0, 0.0, 1.0], [0.05; 3], [1.0, 0.0, 0.0, 0.0], 0.5, c2.map(|c| c / y00).to_vec());
    let out = render_forward(&[back, front], 0, &cam, RenderOptions::default()).unwrap();
    assert!((out.alpha.get(16, 16, 0) - 0.75).abs() < 1e-12);
    for c in 0..3 {
        let expected = 0.5 * c1[c] + 0.25 * c2[c];
        assert!((out.color.get(16, 16, c) - expected).abs() < 1e-12);
    }
}

#[test]
fn background_is_composited_behind() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scene = random_scene(&mut rng, 30, 1);
    let cam = camera(32);
    let raw = render_forward(&scene, 1, &cam, RenderOptions::default()).unwrap();
    let bg = [0.1, 0.4, 0.7];
    let over = render_forward(&scene, 1, &cam, RenderOptions::with_background(bg)).unwrap();
    for p in 0..32 * 32 {
        for c in 0..3 {
            let expected = raw.color.data[3 * p + c] + (1.0 - raw.alpha.data[p]) * bg[c];
            assert_eq!(over.color.data[3 * p + c], expected);
        }
    }
}

#[test]
fn tile_renderer_matches_naive_oracle() {
    let cam = camera(64);
    let opts = RenderOptions {
        background: None,
        early_termination: false,
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 1 + rng.random_range(0..200);
        let scene = random_scene(&mut rng, n, 1);
        let tile = render_forward(&scene, 1, &cam, opts).unwrap();
        let naive = render_naive(&scene, 1, &cam, None).unwrap();
        assert!(tile.color.max_abs_diff(&naive.color) <= 1e-5, "seed {seed}");
        assert!(tile.alpha.max_abs_diff(&naive.alpha) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn opacity_stays_in_unit_interval_and_is_monotone_under_appending_behind() {
    let cam = camera(48);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut scene = random_scene(&mut rng, 60, 0);
        for p in scene.iter_mut() {
            p.opacity_raw += 3.0;
        }
        let before = render_forward(&scene, 0, &cam, RenderOptions::default()).unwrap();
        assert!(before.alpha.data.iter().all(|&a| (0.0..=1.0).contains(&a)));
        // behind everything: far along the viewing direction
        let far = cam.center() + (Vector3::zeros() - cam.center()).normalize() * 20.0;
        let mut extra = GaussianPrimitive::from_activated([far.x, far.y, far.z], [2.0; 3], [1.0, 0.0, 0.0, 0.0], 0.8, vec![1.0; 3]);
        extra.quantize();
        scene.push(extra);
        let after = render_forward(&scene, 0, &cam, RenderOptions::default()).unwrap();
        for (a, b) in before.alpha.data.iter().zip(&after.alpha.data) {
            assert!(b >= a, "opacity decreased: {a} -> {b}");
        }
    }
}

#[test]
fn rendering_is_deterministic_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scene = random_scene(&mut rng, 120, 1);
    let cam = camera(64);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = render_forward(&scene, 1, &cam, RenderOptions::default()).unwrap();
            let d = Image::from_fn(64, 64, 3, |x, y, c| ((x * 7 + y * 3 + c) % 5) as f64 - 2.0);
            let g = render_backward(&scene, &out, &d, None).unwrap();
            (out.color, out.alpha, g.params)
        })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.0.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = random_scene(&mut rng, 40, 1);
    let cam = camera(32);
    let out = render_forward(&scene, 1, &cam, RenderOptions::default()).unwrap();
    let g = render_backward(&scene, &out, &Image::zeros(32, 32, 3), Some(&Image::zeros(32, 32, 1))).unwrap();
    assert_eq!(g.params.max_abs(), 0.0);
}

#[test]
fn backward_without_aux_is_error() {
    let scene = random_scene(&mut ChaCha8Rng::seed_from_u64(1), 3, 0);
    let cam = camera(16);
    let out = render_naive(&scene, 0, &cam, None).unwrap();
    assert!(render_backward(&scene, &out, &Image::zeros(16, 16, 3), None).is_err());
}

/// Finite-difference oracle for L = <w_c, C> + <w_a, A>.
struct Objective {
    cam: Camera,
    sh_degree: usize,
    options: RenderOptions,
    w_c: Image,
    w_a: Image,
}

impl Objective {
    fn eval(&self, scene: &[GaussianPrimitive]) -> (f64, Vec<u32>) {
        let out = render_forward(scene, self.sh_degree, &self.cam, self.options).unwrap();
        let l = out.color.data.iter().zip(&self.w_c.data).map(|(a, b)| a * b).sum::<f64>()
            + out.alpha.data.iter().zip(&self.w_a.data).map(|(a, b)| a * b).sum::<f64>();
        (l, out.contributors)
    }
}

fn param_mut(p: &mut GaussianPrimitive, class: usize, k: usize) -> &mut f64 {
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

fn run_fd_check(seed: u64, n: usize, size: usize, background: Option<[f64; 3]>, coords: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng, n, 1);
    let cam = camera(size);
    let obj = Objective {
        cam: cam.clone(),
        sh_degree: 1,
        options: RenderOptions {
            background,
            early_termination: true,
        },
        w_c: Image::from_fn(size, size, 3, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
        w_a: Image::from_fn(size, size, 1, |_, _, _| rng.random::<f64>() * 2.0 - 1.0),
    };
    let out = render_forward(&scene, 1, &cam, obj.options).unwrap();
    let g = render_backward(&scene, &out, &obj.w_c, Some(&obj.w_a)).unwrap();
    let visible: Vec<usize> = (0..n).filter(|&i| g.visible[i]).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for class in 0..5 {
        let mut done = 0;
        let mut attempts = 0;
        while done < coords && attempts < 20 * coords {
            attempts += 1;
            let i = visible[rng.random_range(0..visible.len())];
            let k = rng.random_range(0..12);
            let analytic = match class {
                0 => g.params.mean[i][k % 3],
                1 => g.params.scale_raw[i][k % 3],
                2 => g.params.rotation[i][k % 4],
                3 => g.params.opacity_raw[i],
                _ => g.params.sh_of(i)[k % 12],
            };
            let mut plus = scene.clone();
            *param_mut(&mut plus[i], class, k) += h;
            let mut minus = scene.clone();
            *param_mut(&mut minus[i], class, k) -= h;
            let (lp, cp) = obj.eval(&plus);
            let (lm, cm) = obj.eval(&minus);
            if cp != cm {
                // a contributor crossed the skip threshold: not differentiable here
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel <= 1e-6,
                "seed {seed} class {class} prim {i} coord {k}: analytic {analytic} numeric {numeric} rel {rel}"
            );
            worst = worst.max(rel);
            done += 1;
        }
        assert_eq!(done, coords, "too many discontinuous probes");
    }
    worst
}

#[test]
fn single_gaussian_sh_gradient_matches_finite_differences() {
    let worst = run_fd_check(11, 1, 32, None, 10);
    assert!(worst <= 1e-6);
}

#[test]
fn random_scene_gradients_match_finite_differences() {
    for seed in 0..6 {
        run_fd_check(200 + seed, 50, 48, None, 8);
    }
    run_fd_check(300, 50, 48, Some([0.3, 0.6, 0.9]), 8);
}

mod project {
    use gausshead::raster::*;
    use gausshead::math::vec3;
    use gausshead::model::{Camera, GaussianPrimitive, Intrinsics};
    use gausshead::Error;
    use nalgebra::Vector3;

    fn camera() -> Camera {
        let intr = Intrinsics { fx: 80.0, fy: 80.0, cx: 32.0, cy: 32.0, width: 64, height: 64, near: 0.2 };
        Camera::look_at(Vector3::new(0.0, 0.0, -4.0), Vector3::zeros(), &intr).unwrap()
    }

    fn prim(mean: [f64; 3], sigma: f64) -> GaussianPrimitive {
        GaussianPrimitive::from_activated(mean, [sigma; 3], [1.0, 0.0, 0.0, 0.0], 0.9, vec![1.0; 3])
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let g = project_gaussian(0, &prim([0.0, 0.0, 1.0], 0.1), 0, &camera()).unwrap().unwrap();
        assert_eq!(g.mean, [32.0, 32.0]);
        assert!((g.depth - 5.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_covariance_matches_numeric_jacobian() {
        // Oracle: finite-difference Jacobian of the pixel projection at the mean.
        let cam = camera();
        let sigma = 1e-3;
        let mean = [0.3, -0.2, 0.5];
        let g = project_gaussian(0, &prim(mean, sigma), 0, &cam).unwrap().unwrap();
        let proj = |m: [f64; 3]| {
            let p = cam.rotation * vec3(&m) + cam.translation;
            [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy]
        };
        let h = 1e-6;
        let mut jac = [[0.0; 3]; 2];
        for a in 0..3 {
            let mut mp = mean;
            let mut mm = mean;
            mp[a] += h;
            mm[a] -= h;
            let (pp, pm) = (proj(mp), proj(mm));
            for r in 0..2 {
                jac[r][a] = (pp[r] - pm[r]) / (2.0 * h);
            }
        }
        let s2 = sigma * sigma;
        let dot = |r: usize, c: usize| (0..3).map(|k| jac[r][k] * jac[c][k]).sum::<f64>() * s2;
        let expected = [dot(0, 0) + 0.3, dot(0, 1), dot(1, 1) + 0.3];
        for k in 0..3 {
            assert!((g.cov[k] - expected[k]).abs() < 1e-9, "{k}: {} vs {}", g.cov[k], expected[k]);
        }
        // on-axis it reduces to (F sigma / d)^2 I + 0.3 I
        let g = project_gaussian(0, &prim([0.0, 0.0, 0.0], sigma), 0, &cam).unwrap().unwrap();
        let f = (80.0 * sigma / 4.0f64).powi(2);
        assert!((g.cov[0] - (f + 0.3)).abs() < 1e-12 && g.cov[1].abs() < 1e-15);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = camera();
        assert!(project_gaussian(0, &prim([0.0, 0.0, -3.9], 0.1), 0, &cam).unwrap().is_none());
        assert!(project_gaussian(0, &prim([0.0, 0.0, -3.85], 0.1), 0, &cam).unwrap().is_none());
        assert!(project_gaussian(0, &prim([0.0, 0.0, -3.7], 0.1), 0, &cam).unwrap().is_some());
    }

    #[test]
    fn offscreen_is_culled() {
        assert!(project_gaussian(0, &prim([10.0, 0.0, 0.0], 0.05), 0, &camera()).unwrap().is_none());
    }

    #[test]
    fn non_finite_names_primitive() {
        let mut p = prim([0.0; 3], 0.1);
        p.mean[1] = f64::NAN;
        match project_gaussian(7, &p, 0, &camera()) {
            Err(Error::Primitive { index, .. }) => assert_eq!(index, 7),
            other => panic!("{other:?}"),
        }
    }
}
