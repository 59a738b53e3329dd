use enkf_core::numerics::{svd_desc, sym_eig_desc, EPS_RANK};
use enkf_core::perturbation::{
    construct_m0, convergence, eakf_jacobian_audit, eigenprojection_derivative,
    eigenvector_derivative, finite_difference as fd, transformation_derivative,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

/// Random symmetric matrix whose eigenvalues are at least 0.05 apart.
fn simple_spectrum(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let c = random_sym(rng, n);
        let v = sym_eig_desc(&c).unwrap().values;
        if v.as_slice().windows(2).all(|w| w[0] - w[1] > 0.05) {
            return c;
        }
    }
}

#[test]
fn derivatives_converge_quadratically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_at_1e6 = 0.0f64;
    let mut slopes = Vec::new();
    for t in 0..100 {
        let n = 2 + t % 4;
        let c = simple_spectrum(&mut rng, n);
        let dc = random_sym(&mut rng, n);
        let idx = t % n;

        let dp = eigenprojection_derivative(&c, &dc, idx).unwrap();
        let a = convergence(dp.as_slice(), &STEPS, |e| {
            Ok(fd::eigenprojection(&c, &dc, idx, e)?.as_slice().to_vec())
        })
        .unwrap();
        let dv = eigenvector_derivative(&c, &dc, idx).unwrap();
        let b = convergence(dv.as_slice(), &STEPS, |e| {
            Ok(fd::eigenvector(&c, &dc, idx, e)?.as_slice().to_vec())
        })
        .unwrap();
        let du = transformation_derivative(&c, &dc).unwrap();
        let u = convergence(du.as_slice(), &STEPS, |e| {
            Ok(fd::transformation(&c, &dc, e)?.as_slice().to_vec())
        })
        .unwrap();
        for check in [a, b, u] {
            worst_at_1e6 = worst_at_1e6.max(check.errors[2]);
            slopes.push(check.slope);
        }
    }
    assert!(worst_at_1e6 < 1e-4, "worst error {worst_at_1e6:e}");
    for s in &slopes {
        assert!((s - 2.0).abs() <= 0.5, "slope {s}");
    }
}

#[test]
fn m0_properties_up_to_twelve() {
    for d in 1..=12 {
        for k in 2..=12 {
            let m = construct_m0(d, k).unwrap();
            assert!(m.column_sum().iter().all(|&x| x == 0.0));
            let r = (k - 1).min(d);
            let gram = &m * m.transpose();
            let expect = DMatrix::from_fn(d, d, |i, j| {
                if i == j && i < r {
                    ((r - i) * (r - i + 1)) as f64
                } else {
                    0.0
                }
            });
            assert_eq!(gram, expect);
            let svd = svd_desc(&m, EPS_RANK).unwrap();
            assert_eq!(svd.rank, r);
            for j in 0..r {
                let expect = (((r - j) * (r - j + 1)) as f64).sqrt();
                assert!((svd.values[j] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn m0_update_matrix_is_diagonal_descending() {
    for (d, k, q) in [(2, 3, 2), (4, 3, 2), (3, 5, 3), (6, 4, 6)] {
        let m = construct_m0(d, k).unwrap();
        let h = enkf_core::perturbation::descending_diagonal_h(d, q).unwrap();
        let svd = svd_desc(&m, EPS_RANK).unwrap();
        assert!((&svd.left - DMatrix::identity(d, d)).norm() < 1e-12);
        let lam = DMatrix::from_diagonal(&svd.range_values());
        let a = &h * svd.left_range() * &lam;
        let upd = a.transpose() * a / (k - 1) as f64;
        let off = &upd - DMatrix::from_diagonal(&upd.diagonal());
        assert!(off.norm() < 1e-12);
        assert!(upd.diagonal().as_slice().windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn jacobian_audit_cases() {
    for (d, k, q) in [(2, 3, 2), (3, 2, 2), (4, 3, 2)] {
        let audit = eakf_jacobian_audit(d, k, q, 0.0, 1e-6).unwrap();
        assert!(audit.passed, "{audit:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transformation_derivative_is_antisymmetric(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = simple_spectrum(&mut rng, n);
        let dc = random_sym(&mut rng, n);
        let du = transformation_derivative(&c, &dc).unwrap();
        prop_assert!((&du + du.transpose()).norm() < 1e-10);
    }

    #[test]
    fn projection_derivative_is_symmetric_and_off_block(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = simple_spectrum(&mut rng, n);
        let dc = random_sym(&mut rng, n);
        let p = enkf_core::perturbation::eigenprojection(&c, 0).unwrap().projector;
        let dp = eigenprojection_derivative(&c, &dc, 0).unwrap();
        prop_assert!((&dp - dp.transpose()).norm() < 1e-10);
        // Differentiating P² = P gives P·DP·P = 0.
        prop_assert!((&p * &dp * &p).norm() < 1e-10);
    }
}
