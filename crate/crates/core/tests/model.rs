mod gaussian {
    use gausshead::model::gaussian::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};
    use gausshead::math::normalize_quat;
    use gausshead::Error;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> CanonicalField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = CanonicalField::new(1, BranchTag::Face).unwrap();
        for _ in 0..n {
            let q = normalize_quat(&std::array::from_fn(|_| rng.random::<f64>() - 0.5)).0;
            f.push(GaussianPrimitive {
                mean: std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0),
                scale_raw: std::array::from_fn(|_| rng.random::<f64>() - 2.0),
                rotation: q,
                opacity_raw: rng.random::<f64>() * 4.0 - 2.0,
                sh: (0..12).map(|_| rng.random::<f64>()).collect(),
            })
            .unwrap();
        }
        f
    }

    #[test]
    fn identity_covariance() {
        let s = covariance_from_scale_rotation(&[1.0; 3], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, Matrix3::identity());
    }

    #[test]
    fn axis_aligned_covariance() {
        let s = covariance_from_scale_rotation(&[2.0, 1.0, 1.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)));
    }

    #[test]
    fn rotated_covariance_permutes_axes() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let s = covariance_from_scale_rotation(&[2.0, 1.0, 1.0], &[h, 0.0, 0.0, h]).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((s - expected).abs().max() < 1e-12, "{s}");
    }

    #[test]
    fn non_finite_covariance_input_rejected() {
        assert!(covariance_from_scale_rotation(&[f64::NAN, 1.0, 1.0], &[1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_deformation_is_identity() {
        let f = random_field(20, 1);
        let d = apply_deformation(&f, &vec![DeformationDelta::ZERO; 20]).unwrap();
        assert_eq!(d, f.primitives);
    }

    #[test]
    fn deformation_is_local() {
        let f = random_field(5, 2);
        let mut deltas = vec![DeformationDelta::ZERO; 5];
        deltas[3].d_mean = [0.1, 0.0, 0.0];
        let d = apply_deformation(&f, &deltas).unwrap();
        for (i, (a, b)) in f.primitives.iter().zip(&d).enumerate() {
            if i == 3 {
                assert_eq!(b.mean[0], a.mean[0] + 0.1);
                assert_eq!(&b.mean[1..], &a.mean[1..]);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn count_mismatch_is_error() {
        let f = random_field(3, 3);
        assert!(matches!(
            apply_deformation(&f, &[DeformationDelta::ZERO; 2]),
            Err(Error::CountMismatch { .. })
        ));
    }

    #[test]
    fn degenerate_rotation_names_primitive() {
        let f = random_field(4, 4);
        let mut deltas = vec![DeformationDelta::ZERO; 4];
        deltas[2].d_rotation = f.primitives[2].rotation.map(|v| -v);
        match apply_deformation(&f, &deltas) {
            Err(Error::Primitive { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_init_uses_nearest_neighbor_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = CanonicalField::init_uniform(1, BranchTag::Mouth, 50, [-1.0; 3], [1.0; 3], 0.1, &mut rng).unwrap();
        let means: Vec<_> = f.primitives.iter().map(|p| p.mean).collect();
        let nn = mean_nearest_neighbor_distance(&means);
        for p in &f.primitives {
            for s in p.scale() {
                assert!((s - nn).abs() < 1e-5 * nn);
            }
            assert!((p.opacity() - 0.1).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn covariance_is_psd(s in proptest::array::uniform3(1e-3f64..3.0),
                             q in proptest::array::uniform4(-1.0f64..1.0)) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-4);
            let q = normalize_quat(&q).0;
            let sigma = covariance_from_scale_rotation(&s, &q).unwrap();
            prop_assert!((sigma - sigma.transpose()).abs().max() < 1e-12);
            let eig = sigma.symmetric_eigenvalues();
            let tol = 1e-12 * sigma.abs().max();
            prop_assert!(eig.iter().all(|&e| e >= -tol), "{eig}");
        }

        #[test]
        fn deformation_keeps_opacity_and_color(seed in any::<u64>(), scale in 0.0f64..0.5) {
            let f = random_field(8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let deltas: Vec<_> = (0..8).map(|_| DeformationDelta {
                d_mean: std::array::from_fn(|_| scale * (rng.random::<f64>() - 0.5)),
                d_scale: std::array::from_fn(|_| scale * (rng.random::<f64>() - 0.5)),
                d_rotation: std::array::from_fn(|_| scale * (rng.random::<f64>() - 0.5)),
            }).collect();
            let d = apply_deformation(&f, &deltas).unwrap();
            for (a, b) in f.primitives.iter().zip(&d) {
                prop_assert_eq!(a.opacity_raw.to_bits(), b.opacity_raw.to_bits());
                prop_assert!(a.sh.iter().zip(&b.sh).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            // additive inverse on centers
            let neg: Vec<_> = deltas.iter().map(|d| DeformationDelta::translation(d.negated().d_mean)).collect();
            let shifted = CanonicalField { primitives: d, ..f.clone() };
            let back = apply_deformation(&shifted, &neg).unwrap();
            for (a, b) in f.primitives.iter().zip(&back) {
                for k in 0..3 {
                    prop_assert!((a.mean[k] - b.mean[k]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn renormalized_rotation_is_unit(q in proptest::array::uniform4(-1.0f64..1.0),
                                         dq in proptest::array::uniform4(-0.25f64..0.25)) {
            let q = normalize_quat(&q.map(|v| if v == 0.0 { 0.1 } else { v })).0;
            // |dq| <= 0.5 by construction
            let sum: [f64; 4] = std::array::from_fn(|k| q[k] + dq[k]);
            let n = normalize_quat(&sum).0;
            let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}

mod sh {
    use gausshead::model::sh::*;
    use gausshead::Error;

    const C0: f64 = 0.282_094_791_773_878_14;

    #[test]
    fn dc_only_is_view_independent() {
        let coeffs = [0.7, 0.2, 1.3];
        for dir in [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.6, 0.0, 0.8]] {
            let c = sh_to_color(0, &coeffs, &dir).unwrap();
            for ch in 0..3 {
                assert_eq!(c[ch], coeffs[ch] * C0);
            }
        }
    }

    #[test]
    fn zero_coefficients_give_black() {
        let c = sh_to_color(1, &[0.0; 12], &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(c, [0.0; 3]);
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        assert!(matches!(
            sh_to_color(1, &[0.0; 3], &[0.0, 0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn basis_jacobian_matches_finite_differences() {
        let d = [0.3, -0.5, 0.7];
        let mut jac = [[0.0; 3]; 16];
        let mut v = [0.0; 16];
        eval_basis(3, &d, &mut v, Some(&mut jac));
        let h = 1e-6;
        for a in 0..3 {
            let mut dp = d;
            let mut dm = d;
            dp[a] += h;
            dm[a] -= h;
            let mut vp = [0.0; 16];
            let mut vm = [0.0; 16];
            eval_basis(3, &dp, &mut vp, None);
            eval_basis(3, &dm, &mut vm, None);
            for k in 0..16 {
                let fd = (vp[k] - vm[k]) / (2.0 * h);
                assert!((fd - jac[k][a]).abs() < 1e-8, "basis {k} axis {a}");
            }
        }
    }
}

mod camera {
    use gausshead::model::camera::*;
    use nalgebra::Vector3;

    fn intr() -> Intrinsics {
        Intrinsics { fx: 50.0, fy: 50.0, cx: 16.0, cy: 16.0, width: 32, height: 32, near: 0.1 }
    }

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(Vector3::new(1.0, -0.5, -3.0), Vector3::zeros(), &intr()).unwrap();
        let p = cam.rotation * Vector3::zeros() + cam.translation;
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert!((cam.center() - Vector3::new(1.0, -0.5, -3.0)).norm() < 1e-12);
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut e = Camera::orbit(Vector3::zeros(), 3.0, 0.1, 0.0, &intr()).unwrap().extrinsics();
        e.rotation[0] *= 1.01;
        assert!(Camera::new(&intr(), &e).is_err());
    }

    #[test]
    fn zero_size_rejected() {
        let mut i = intr();
        i.width = 0;
        let e = Camera::orbit(Vector3::zeros(), 3.0, 0.0, 0.0, &intr()).unwrap().extrinsics();
        assert!(Camera::new(&i, &e).is_err());
    }
}

mod checkpoint {
    use gausshead::model::{BranchTag, CanonicalField, GaussianPrimitive};
    use std::fs;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_is_bit_exact(values in proptest::collection::vec(-1e3f32..1e3, 23 * 4),
                                  tag in prop_oneof![Just(BranchTag::Face), Just(BranchTag::Mouth)]) {
            let mut field = CanonicalField::new(1, tag).unwrap();
            for chunk in values.chunks_exact(23) {
                let flat: Vec<f64> = chunk.iter().map(|&v| v as f64).collect();
                field.push(GaussianPrimitive::read_flat(&flat)).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            field.save(dir.path(), "face").unwrap();
            let back = CanonicalField::load(dir.path(), "face").unwrap();
            prop_assert_eq!(back.branch, field.branch);
            prop_assert_eq!(back.sh_degree, field.sh_degree);
            let a: Vec<u64> = field.primitives.iter().flat_map(|p| { let mut v = vec![]; p.write_flat(&mut v); v }).map(f64::to_bits).collect();
            let b: Vec<u64> = back.primitives.iter().flat_map(|p| { let mut v = vec![]; p.write_flat(&mut v); v }).map(f64::to_bits).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut field = CanonicalField::new(0, BranchTag::Face).unwrap();
        field
            .push(GaussianPrimitive::read_flat(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        field.save(dir.path(), "f").unwrap();
        fs::write(dir.path().join("f.bin"), [0u8; 8]).unwrap();
        assert!(CanonicalField::load(dir.path(), "f").is_err());
    }
}
