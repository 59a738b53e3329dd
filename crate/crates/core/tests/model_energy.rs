use enkf_core::models::{lorenz63_drift, EnergyFunctional, ModelSpec, NoiseFactor, NsGalerkin};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIGMA: f64 = 10.0;
const R: f64 = 28.0;
const B: f64 = 8.0 / 3.0;

fn random_state(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

/// Mean and standard error of a sample.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn lorenz63_energy_dissipates() {
    let noise = 0.7;
    let model = ModelSpec::lorenz63(SIGMA, R, B, 0.01, 10)
        .unwrap()
        .with_noise(NoiseFactor::Isotropic(noise))
        .unwrap();
    let energy = EnergyFunctional::lorenz63(SIGMA, R);
    let beta = 2.0f64.min(2.0 * SIGMA).min(B);
    let diffusion = noise * noise * (R + 2.0 * SIGMA);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let u = random_state(&mut rng, 3, 200.0);
        let lhs = model.energy_generator(&energy, &u).unwrap();
        let e = energy.eval(&u).unwrap();
        let rhs = -beta * e + 4.0 * B * SIGMA * R * R + diffusion;
        assert!(
            lhs <= rhs + 1e-9 * (1.0 + rhs.abs()),
            "u = {u:?}: {lhs} > {rhs}"
        );
    }
}

/// Drift of `y² + (z − r)²` computed straight from the vector field.
fn partial_generator(u: [f64; 3]) -> f64 {
    let f = lorenz63_drift(u, SIGMA, R, B);
    2.0 * u[1] * f[1] + 2.0 * (u[2] - R) * f[2]
}

#[test]
fn lorenz63_partial_energy_bound() {
    let gamma = 2.0f64.min(B);
    let constant = B * B * R * R / (2.0 * B - gamma);
    let energy = EnergyFunctional::lorenz63_partial(R);
    let model = ModelSpec::lorenz63(SIGMA, R, B, 0.01, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let u = random_state(&mut rng, 3, 150.0);
        let lhs = model.energy_generator(&energy, &u).unwrap();
        let oracle = partial_generator([u[0], u[1], u[2]]);
        assert!((lhs - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()));
        let rhs = -gamma * energy.eval(&u).unwrap() + constant;
        assert!(lhs <= rhs + 1e-9 * (1.0 + rhs.abs()));
    }
    // The x-coordinate drops out entirely.
    let a = partial_generator([3.0, -2.0, 40.0]);
    let b = partial_generator([-77.0, -2.0, 40.0]);
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn partial_energy_constant_r_squared_is_too_small() {
    let gamma = 2.0f64.min(B);
    let u = [0.0, 0.0, 5.6];
    let e = 0.0 + (u[2] - R).powi(2);
    let excess = partial_generator(u) + gamma * e;
    assert!(excess > R * R, "{excess}");
    assert!((excess - 1672.5).abs() < 0.1);
    // The sharp constant is attained at z − r = −b r / (2b − γ).
    let w = -B * R / (2.0 * B - gamma);
    let sharp = partial_generator([0.0, 0.0, R + w]) + gamma * w * w;
    assert!((sharp - B * B * R * R / (2.0 * B - gamma)).abs() < 1e-9 * sharp);
}

#[test]
fn lorenz96_kinetic_energy_bound() {
    let n = 40;
    let f = 8.0;
    let s = 0.5;
    let model = ModelSpec::lorenz96(n, f, 0.05, 10)
        .unwrap()
        .with_noise(NoiseFactor::Isotropic(s))
        .unwrap();
    let energy = EnergyFunctional::kinetic(n);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let u = random_state(&mut rng, n, 50.0);
        let lhs = model.energy_generator(&energy, &u).unwrap();
        let rhs = -u.norm_squared() + n as f64 * f * f + s * s * n as f64;
        assert!(lhs <= rhs + 1e-9 * (1.0 + rhs.abs()));
    }
}

#[test]
fn lorenz96_discrete_energy_principle() {
    let n = 40;
    let f = 8.0;
    let s = 0.5;
    let h = 0.05;
    let model = ModelSpec::lorenz96(n, f, h, 10)
        .unwrap()
        .with_noise(NoiseFactor::Isotropic(s))
        .unwrap();
    let k = n as f64 * (f * f + s * s);
    let beta_h = 1.0 - (-h).exp();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let u = random_state(&mut rng, n, 12.0);
        let draws: Vec<f64> = (0..2000)
            .map(|_| model.forecast(&u, &mut rng).unwrap().norm_squared())
            .collect();
        let (m, se) = mean_se(&draws);
        let bound = (1.0 - beta_h) * u.norm_squared() + k * h;
        assert!(m <= bound + 3.0 * se, "{m} ± {se} vs {bound}");
    }
}

fn ns_state(rng: &mut ChaCha8Rng, ns: &NsGalerkin, scale: f64) -> DVector<f64> {
    random_state(rng, ns.state_dim(), scale)
}

#[test]
fn ns_advection_conserves_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=4 {
        let ns = NsGalerkin::new(n, 0.1).unwrap();
        for _ in 0..500 {
            let state = ns_state(&mut rng, &ns, 5.0);
            let v = ns.unpack(state.as_slice());
            let norm = state.norm();
            assert!(ns.advection_energy(&v).abs() < 1e-10 * norm.powi(3).max(1.0));
        }
    }
}

#[test]
fn ns_energy_dissipates() {
    let ns = NsGalerkin::new(3, 0.05).unwrap();
    let forcing: Vec<f64> = (0..ns.modes().len())
        .map(|i| 0.1 + 0.02 * i as f64)
        .collect();
    let total: f64 = forcing.iter().map(|s| s * s).sum();
    let nu = ns.viscosity();
    let model = ModelSpec::truncated_ns(ns.clone(), &forcing, 0.01, 5).unwrap();
    let energy = EnergyFunctional::kinetic(ns.state_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let state = ns_state(&mut rng, &ns, 3.0);
        let coeffs = ns.unpack(state.as_slice());
        let sum_sq: f64 = coeffs.iter().map(|c| c.norm_sqr()).sum();
        assert!((sum_sq - state.norm_squared()).abs() < 1e-12 * (1.0 + sum_sq));
        let lhs = model.energy_generator(&energy, &state).unwrap();
        let rhs = -2.0 * nu * sum_sq + total;
        assert!(lhs <= rhs + 1e-9 * (1.0 + rhs.abs()), "{lhs} > {rhs}");
    }
}

#[test]
fn commuting_linear_observable_contracts() {
    let a = DMatrix::identity(2, 2) * 0.5;
    let noise = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
    let model = ModelSpec::linear_contraction(a, 0.5, &noise).unwrap();
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let energy = EnergyFunctional::observable(&h);
    let trace = (&h * &noise * h.transpose()).trace();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let u = random_state(&mut rng, 2, 10.0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| energy.eval(&model.forecast(&u, &mut rng).unwrap()).unwrap())
            .collect();
        let (m, se) = mean_se(&draws);
        let bound = 0.25 * energy.eval(&u).unwrap() + trace;
        assert!(
            (m - bound).abs() <= 3.0 * se + 1e-12,
            "{m} ± {se} vs {bound}"
        );
    }
}

#[test]
fn antithetic_normals_reflect_linear_noise() {
    let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
    let noise = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.2]);
    let model = ModelSpec::linear_contraction(a.clone(), 0.5, &noise).unwrap();
    let u = DVector::from_vec(vec![1.0, -2.0]);
    let xi = vec![0.7, -1.3];
    let neg: Vec<f64> = xi.iter().map(|x| -x).collect();
    let plus = model.forecast_with_normals(&u, &xi).unwrap();
    let minus = model.forecast_with_normals(&u, &neg).unwrap();
    assert!(((&plus + &minus) * 0.5 - &a * &u).norm() < 1e-14);
    assert!(model.forecast_with_normals(&u, &xi[..1]).is_err());
}

#[test]
fn noise_dim_counts_substeps() {
    let m = ModelSpec::lorenz63(SIGMA, R, B, 0.01, 7)
        .unwrap()
        .with_noise(NoiseFactor::Isotropic(1.0))
        .unwrap();
    let u = DVector::from_vec(vec![1.0, 1.0, 1.0]);
    assert_eq!(m.noise_dim(&u), 21);
    let quiet = ModelSpec::lorenz63(SIGMA, R, B, 0.01, 7).unwrap();
    assert_eq!(quiet.noise_dim(&u), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = quiet.forecast(&u, &mut rng).unwrap();
    let b = quiet.forecast_with_normals(&u, &[]).unwrap();
    assert_eq!(a, b);
}
