use enkf_core::diagnostics::*;
use enkf_core::filters::{FilterKind, InflationScheme};
use enkf_core::models::{EnergyFunctional, ModelSpec, NoiseFactor};
use enkf_core::observations::ObservationOperator;
use enkf_core::rng::StreamKey;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_samples(d: usize, n: usize, seed: u64) -> Samples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = (0..n)
        .map(|i| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)) * (1.0 + i as f64 * 0.1))
        .collect();
    Samples {
        states,
        is_shell: vec![false; n],
    }
}

#[test]
fn linear_estimate_recovers_constants() {
    let d = 3;
    let sigma2 = 0.4;
    let model = ModelSpec::linear_contraction(
        DMatrix::identity(d, d) * 0.5,
        0.5,
        &(DMatrix::identity(d, d) * sigma2),
    )
    .unwrap();
    let est = estimate_criterion(
        &model,
        &EnergyFunctional::kinetic(d),
        &linear_samples(d, 200, 1),
        2000,
        &StreamKey::new(11),
    )
    .unwrap();
    let trace = sigma2 * d as f64;
    assert!((est.beta - 0.75).abs() <= 0.075, "{est:?}");
    assert!((est.k - trace).abs() <= 0.1 * trace, "{est:?}");
    assert!(est.beta_half_width.is_finite() && est.k_half_width.is_finite());
    assert_eq!(est.samples, 200);
}

#[test]
fn noiseless_linear_estimate() {
    let model =
        ModelSpec::linear_contraction(DMatrix::identity(2, 2) * 0.5, 0.5, &DMatrix::zeros(2, 2))
            .unwrap();
    let est = estimate_criterion(
        &model,
        &EnergyFunctional::kinetic(2),
        &linear_samples(2, 150, 2),
        10,
        &StreamKey::new(0),
    )
    .unwrap();
    assert!(est.beta >= 0.75 - 1e-9);
    assert!(est.k.abs() < 1e-9);
}

fn l63_samples(model: &ModelSpec, shell: usize, center: DVector<f64>, radius: f64) -> Samples {
    let spec = SampleSpec {
        bulk: 150,
        spinup: 100,
        spacing: 4,
        start: DVector::from_vec(vec![1.0, 1.0, 25.0]),
        shell,
        shell_radius: radius,
        center,
    };
    generate_samples(model, &spec, &StreamKey::new(5)).unwrap()
}

#[test]
fn lorenz63_estimate_is_dissipative() {
    let (s, r, b, h) = (10.0, 28.0, 8.0 / 3.0, 0.05);
    let model = ModelSpec::lorenz63(s, r, b, h, 50)
        .unwrap()
        .with_noise(NoiseFactor::Isotropic(1.0))
        .unwrap();
    let energy = EnergyFunctional::lorenz63(s, r);
    let samples = l63_samples(&model, 100, energy.shift().clone(), 120.0);
    let est = estimate_criterion(&model, &energy, &samples, 200, &StreamKey::new(7)).unwrap();
    assert!(est.beta > 0.0 && est.k.is_finite(), "{est:?}");
    assert!(est.admissible());
    // The continuous-time constants give an admissible pair, so the fitted
    // stationary level cannot be much above theirs.
    let beta_c = 2.0f64.min(2.0 * s).min(b);
    let k_c = 4.0 * b * s * r * r + (r + 2.0 * s);
    let beta_h = 1.0 - (-beta_c * h).exp();
    let level = k_c * h / beta_h;
    assert!(
        est.k / est.beta <= 1.05 * level,
        "{} vs {level}",
        est.k / est.beta
    );
}

#[test]
fn lorenz63_x_marginal_negative_control() {
    let model = ModelSpec::lorenz63(10.0, 28.0, 8.0 / 3.0, 0.05, 50).unwrap();
    let h = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    let energy = EnergyFunctional::observable(&h);
    let samples = l63_samples(&model, 100, DVector::zeros(3), 60.0);
    let est = estimate_criterion(&model, &energy, &samples, 1, &StreamKey::new(9)).unwrap();
    println!(
        "x-marginal: beta {} K {} violations {}",
        est.beta, est.k, est.violations
    );
}

#[test]
fn square_root_covariance_audit() {
    let key = StreamKey::new(2024).with_scenario("audit");
    for kind in [FilterKind::Etkf, FilterKind::Eakf] {
        let audit = covariance_identity_audit(kind, 1000, &key).unwrap();
        assert!(audit.max_residual < 1e-9, "{audit:?}");
    }
    assert!(covariance_identity_audit(FilterKind::Enkf, 10, &key).is_err());
}

#[test]
fn audit_family_covers_shapes() {
    let key = StreamKey::new(3);
    let mut shapes = [false; 3];
    let mut labels = std::collections::BTreeSet::new();
    for i in 0..60 {
        let inst = audit_instance(i, &key);
        let (d, k) = inst.spread.shape();
        shapes[(k.cmp(&d) as i8 + 1) as usize] = true;
        labels.insert(inst.label);
        assert!(inst.spread.column_sum().norm() < 1e-9 * (1.0 + inst.spread.norm()));
    }
    assert_eq!(shapes, [true; 3]);
    assert_eq!(labels.len(), 5);
}

#[test]
fn kalman_covariance_matches_information_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let d = rng.random_range(1..5);
        let k = d + rng.random_range(2..5);
        let s = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
        let h = DMatrix::from_fn(rng.random_range(1..=d), d, |_, _| {
            rng.random_range(-1.0..1.0)
        });
        let c = &s * s.transpose() / (k - 1) as f64;
        let info = (c.try_inverse().unwrap() + h.transpose() * &h)
            .try_inverse()
            .unwrap();
        let ours = kalman_posterior_covariance(&s, &h).unwrap();
        assert!((ours - &info).norm() < 1e-8 * (1.0 + info.norm()));
    }
}

#[test]
fn enkf_covariance_on_average() {
    let audit = enkf_averaged_audit(10_000, &StreamKey::new(77)).unwrap();
    assert!(audit.passed, "{audit:?}");
}

fn linear_setup() -> (ModelSpec, ObservationOperator) {
    let d = 4;
    let model = ModelSpec::linear_contraction(
        DMatrix::identity(d, d) * 0.6,
        0.4,
        &(DMatrix::identity(d, d) * 0.2),
    )
    .unwrap();
    (model, ObservationOperator::identity(d).unwrap())
}

fn coupled_setup<'a>(
    kind: FilterKind,
    model: &'a ModelSpec,
    op: &'a ObservationOperator,
    horizon: usize,
    key: StreamKey,
) -> TrialSetup<'a> {
    TrialSetup {
        kind,
        model,
        op,
        scheme: InflationScheme::None,
        horizon,
        lyapunov_m: 1.0,
        key,
    }
}

#[test]
fn identical_replicas_have_zero_distance() {
    let (model, op) = linear_setup();
    let key = StreamKey::new(8);
    let u0 = DVector::from_element(4, 1.0);
    let ens = initial_condition(&u0, 6, &DVector::zeros(4), 1.0, &key).unwrap();
    for kind in [FilterKind::Enkf, FilterKind::Etkf, FilterKind::Eakf] {
        let setup = coupled_setup(kind, &model, &op, 50, key);
        let rec = memory_loss_trial(&setup, &u0, &ens, &ens).unwrap();
        assert_eq!(rec.distances.len(), 51);
        assert!(rec.distances.iter().all(|&d| d == 0.0));
    }
}

#[test]
fn offset_replicas_forget_their_start() {
    let (model, op) = linear_setup();
    let key = StreamKey::new(9);
    let u0 = DVector::from_element(4, 1.0);
    let mu = initial_condition(&u0, 6, &DVector::zeros(4), 1.0, &key).unwrap();
    let nu = initial_condition(&u0, 6, &DVector::from_element(4, 10.0), 1.0, &key).unwrap();
    let setup = coupled_setup(FilterKind::Enkf, &model, &op, 200, key);
    let rec = memory_loss_trial(&setup, &u0, &mu, &nu).unwrap();
    assert!(!rec.diverged);
    assert!(
        *rec.distances.last().unwrap() < 1e-6,
        "{:?}",
        rec.distances.last()
    );
    let fit = fit_decay(&rec.distances, 1e-12).unwrap();
    assert!(fit.gamma < 1.0);
}

#[test]
fn linear_boundedness_trial() {
    let (model, op) = linear_setup();
    let u0 = DVector::from_element(4, 2.0);
    for kind in [FilterKind::Enkf, FilterKind::Etkf, FilterKind::Eakf] {
        let key = StreamKey::new(10).with_replicate(1);
        let ens = initial_condition(&u0, 5, &DVector::zeros(4), 1.0, &key).unwrap();
        let setup = TrialSetup {
            kind,
            model: &model,
            op: &op,
            scheme: InflationScheme::None,
            horizon: 2000,
            lyapunov_m: 10.0,
            key,
        };
        let rec = boundedness_trial(&setup, &u0, &ens).unwrap();
        assert_eq!(rec.steps.len(), 2000);
        assert!(!rec.diverged && rec.running_max.is_finite());
        assert_eq!(rec.replicate, 1);
        if let Some(m) = rec.min_contraction_margin {
            assert!(m >= -1e-9);
        } else {
            assert_eq!(kind, FilterKind::Enkf);
        }
        let series: Vec<f64> = rec.steps.iter().map(|s| s.lyapunov).collect();
        let early = window_stats(&series, 500, 10).unwrap();
        let late = window_stats(&series, 1000, 10).unwrap();
        assert!(
            (early.mean - late.mean).abs()
                < 6.0 * (early.std_error + late.std_error) + 0.1 * late.mean
        );
    }
}

#[test]
fn sparse_l96_negative_control() {
    let model = ModelSpec::lorenz96(40, 8.0, 0.05, 10)
        .unwrap()
        .with_noise(NoiseFactor::Isotropic(0.5))
        .unwrap();
    let op = ObservationOperator::every_nth(40, 4).unwrap();
    let key = StreamKey::new(12);
    let u0 = DVector::from_fn(40, |i, _| 8.0 + (i as f64).sin());
    let ens = initial_condition(&u0, 10, &DVector::zeros(40), 1.0, &key).unwrap();
    let setup = TrialSetup {
        kind: FilterKind::Enkf,
        model: &model,
        op: &op,
        scheme: InflationScheme::None,
        horizon: 300,
        lyapunov_m: default_lyapunov_m(0.04),
        key,
    };
    let rec = boundedness_trial(&setup, &u0, &ens).unwrap();
    println!(
        "sparse H: diverged {} after {} steps",
        rec.diverged,
        rec.steps.len()
    );
    assert!(rec.diverged || rec.steps.len() == 300);
}
