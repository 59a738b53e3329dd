//! Empirical checks of the stability theory: dissipation-constant estimation,
//! Lyapunov boundedness trials, coupled memory-loss trials and the posterior
//! covariance audit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::filters::{
    analysis, eakf_spread, etkf_spread, forecast_ensemble, Ensemble, FilterKind, InflationScheme,
};
use crate::models::{EnergyFunctional, ModelSpec};
use crate::numerics::{spd_solve, sym_eig_desc};
use crate::observations::ObservationOperator;
use crate::rng::{standard_normal_vector, Role, StreamKey};

/// Minimum number of sampled states behind a [`DissipationEstimate`].
pub const MIN_SAMPLES: usize = 100;

/// Largest `β` the estimator will report.
pub const BETA_MAX: f64 = 1.0 - 1e-9;

/// Fitted constants of `E ℰ(Ψ_h(u) + ζ) ≤ (1 − β) ℰ(u) + K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DissipationEstimate {
    pub beta: f64,
    pub k: f64,
    /// Root-mean-square slack of the fitted bound over the samples.
    pub residual: f64,
    pub samples: usize,
    pub beta_half_width: f64,
    pub k_half_width: f64,
    /// Shell states whose expected energy did not decrease.
    pub violations: usize,
}

impl DissipationEstimate {
    /// True when no large-radius sample contradicts dissipation.
    pub fn admissible(&self) -> bool {
        self.violations == 0 && self.beta > 0.0
    }

    /// `β̂ − 3·hw`, floored away from zero.
    pub fn beta_lower(&self) -> f64 {
        (self.beta - 3.0 * self.beta_half_width).max(1e-12)
    }

    pub fn k_upper(&self) -> f64 {
        self.k + 3.0 * self.k_half_width
    }
}

/// Where to sample states for [`estimate_criterion`].
#[derive(Debug, Clone)]
pub struct SampleSpec {
    /// States recorded along a free signal trajectory.
    pub bulk: usize,
    pub spinup: usize,
    pub spacing: usize,
    pub start: DVector<f64>,
    /// States at distance `shell_radius` from `center` in random directions.
    pub shell: usize,
    pub shell_radius: f64,
    pub center: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub states: Vec<DVector<f64>>,
    pub is_shell: Vec<bool>,
}

pub fn generate_samples(model: &ModelSpec, spec: &SampleSpec, key: &StreamKey) -> Result<Samples> {
    let d = model.dim();
    if spec.start.len() != d || spec.center.len() != d {
        return Err(invalid(
            "sample start and center must match the model dimension",
        ));
    }
    if spec.bulk > 0 && spec.spacing == 0 {
        return Err(invalid("sample spacing must be at least 1"));
    }
    let mut states = Vec::with_capacity(spec.bulk + spec.shell);
    let mut u = spec.start.clone();
    let mut step = 0u64;
    let mut advance = |u: &mut DVector<f64>, n: usize| -> Result<()> {
        for _ in 0..n {
            *u = model.forecast(u, &mut key.rng(step, 1, Role::Sampling))?;
            step += 1;
        }
        Ok(())
    };
    advance(&mut u, spec.spinup)?;
    for _ in 0..spec.bulk {
        advance(&mut u, spec.spacing)?;
        states.push(u.clone());
    }
    for i in 0..spec.shell {
        let mut rng = key.rng(i as u64, 2, Role::Sampling);
        let dir = loop {
            let v = standard_normal_vector(&mut rng, d);
            let n = v.norm();
            if n > 1e-12 {
                break v / n;
            }
        };
        states.push(&spec.center + dir * spec.shell_radius);
    }
    let mut is_shell = vec![false; spec.bulk];
    is_shell.resize(spec.bulk + spec.shell, true);
    Ok(Samples { states, is_shell })
}

/// Monte Carlo estimate of `m(u) = E ℰ(Ψ_h(u) + ζ)` and its standard error.
///
/// `normals[j]` drives the `j`-th antithetic pair; sharing the same set
/// across states makes the per-state estimates comparable.
fn expected_energy(
    model: &ModelSpec,
    energy: &EnergyFunctional,
    u: &DVector<f64>,
    normals: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let m = model.noise_dim(u);
    if m == 0 || normals.is_empty() {
        let next = model.forecast_with_normals(u, &[])?;
        return Ok((energy.eval(&next)?, 0.0));
    }
    let mut vals = Vec::with_capacity(normals.len());
    let mut neg = vec![0.0; m];
    for xi in normals {
        let xi = &xi[..m];
        for (n, x) in neg.iter_mut().zip(xi) {
            *n = -x;
        }
        let a = energy.eval(&model.forecast_with_normals(u, xi)?)?;
        let b = energy.eval(&model.forecast_with_normals(u, &neg)?)?;
        vals.push(0.5 * (a + b));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Fits `(β̂, K̂)` against sampled states using `draws` antithetic pairs per
/// state. Among all `β ∈ (0, BETA_MAX]` the fit minimizes the stationary
/// level `K(β)/β`, where `K(β)` is the smallest constant satisfying every
/// sampled constraint; ties go to the larger `β`.
pub fn estimate_criterion(
    model: &ModelSpec,
    energy: &EnergyFunctional,
    samples: &Samples,
    draws: usize,
    key: &StreamKey,
) -> Result<DissipationEstimate> {
    let n = samples.states.len();
    if n < MIN_SAMPLES {
        return Err(invalid(format!(
            "need at least {MIN_SAMPLES} sample states, got {n}"
        )));
    }
    if samples.is_shell.len() != n {
        return Err(invalid("shell flags must match the sample states"));
    }
    if energy.dim() != model.dim() {
        return Err(invalid("energy and model dimensions differ"));
    }
    let width = samples
        .states
        .iter()
        .map(|u| model.noise_dim(u))
        .max()
        .unwrap_or(0);
    let normals: Vec<Vec<f64>> = if width == 0 {
        Vec::new()
    } else {
        (0..draws)
            .map(|j| {
                let mut rng = key.rng(j as u64, 0, Role::Sampling);
                (0..width).map(|_| rng.sample(StandardNormal)).collect()
            })
            .collect()
    };
    let eval = |u: &DVector<f64>| -> Result<(f64, f64, f64)> {
        let (m, se) = expected_energy(model, energy, u, &normals)?;
        Ok((energy.eval(u)?, m, se))
    };
    #[cfg(feature = "parallel")]
    let rows: Vec<Result<(f64, f64, f64)>> = {
        use rayon::prelude::*;
        samples.states.par_iter().map(eval).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Result<(f64, f64, f64)>> = samples.states.iter().map(eval).collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let e: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let se: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (beta, k) = fit_dissipation(&e, &m)?;

    let mut beta_hw = 0.0f64;
    let mut k_hw = 0.0f64;
    for sign in [-1.0, 1.0] {
        let shifted: Vec<f64> = m.iter().zip(&se).map(|(m, s)| m + sign * s).collect();
        let (b, kk) = fit_dissipation(&e, &shifted)?;
        beta_hw = beta_hw.max((b - beta).abs());
        k_hw = k_hw.max((kk - k).abs());
    }
    let slack: f64 = e
        .iter()
        .zip(&m)
        .map(|(e, m)| ((1.0 - beta) * e + k - m).powi(2))
        .sum::<f64>()
        / n as f64;
    let violations = e
        .iter()
        .zip(&m)
        .zip(&samples.is_shell)
        .filter(|((e, m), &shell)| shell && m >= e)
        .count();
    Ok(DissipationEstimate {
        beta,
        k,
        residual: slack.sqrt(),
        samples: n,
        beta_half_width: beta_hw,
        k_half_width: k_hw,
        violations,
    })
}

/// `K(β) = max(0, maxᵢ mᵢ − (1 − β) eᵢ)`.
fn k_of_beta(e: &[f64], m: &[f64], beta: f64) -> f64 {
    e.iter()
        .zip(m)
        .map(|(e, m)| m - (1.0 - beta) * e)
        .fold(0.0f64, f64::max)
}

/// Minimizes `K(β)/β` over `(0, BETA_MAX]`. The upper envelope of the lines
/// `(mᵢ − eᵢ) + β eᵢ` is piecewise linear, so the optimum sits at a
/// breakpoint, a zero crossing, or the right endpoint.
pub fn fit_dissipation(e: &[f64], m: &[f64]) -> Result<(f64, f64)> {
    if e.len() != m.len() || e.is_empty() {
        return Err(invalid(
            "energy and expectation samples must be non-empty and of equal length",
        ));
    }
    if e.iter().chain(m).any(|x| !x.is_finite()) {
        return Err(invalid("non-finite energy samples"));
    }
    let a: Vec<f64> = e.iter().zip(m).map(|(e, m)| m - e).collect();
    let better = |i: usize, j: usize, beta: f64| {
        let (vi, vj) = (a[i] + beta * e[i], a[j] + beta * e[j]);
        vi > vj || (vi == vj && e[i] > e[j])
    };
    let mut cur = (0..a.len()).fold(0, |best, i| if better(i, best, 0.0) { i } else { best });
    let mut beta = 0.0;
    let mut candidates = vec![BETA_MAX];
    loop {
        // Zero crossing on the current piece.
        if e[cur] > 0.0 {
            let z = -a[cur] / e[cur];
            if z > beta && z < BETA_MAX {
                candidates.push(z);
            }
        }
        let mut next: Option<(f64, usize)> = None;
        for j in 0..a.len() {
            if e[j] <= e[cur] {
                continue;
            }
            let x = (a[cur] - a[j]) / (e[j] - e[cur]);
            if x > beta && x < BETA_MAX {
                next = match next {
                    Some((bx, bj)) if bx < x || (bx == x && e[bj] >= e[j]) => Some((bx, bj)),
                    _ => Some((x, j)),
                };
            }
        }
        match next {
            Some((x, j)) => {
                candidates.push(x);
                beta = x;
                cur = j;
            }
            None => break,
        }
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &b in &candidates {
        let k = k_of_beta(e, m, b);
        let f = k / b;
        best = match best {
            None => Some((f, b, k)),
            Some((bf, bb, bk)) => {
                let tol = 1e-12 * bf.abs().max(f.abs()) + 1e-300;
                if f < bf - tol || ((f - bf).abs() <= tol && (b > bb || (b == bb && k < bk))) {
                    Some((f, b, k))
                } else {
                    Some((bf, bb, bk))
                }
            }
        };
    }
    let (_, b, k) = best.expect("candidate list is never empty");
    Ok((b, k))
}

/// Contraction rate and additive constant of the ensemble Lyapunov
/// functional `ℰ = Σₖ|HVₖ|² + K·M·|HU|²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConstants {
    pub rate: f64,
    pub constant: f64,
    pub m: f64,
}

/// Smallest admissible weight: `β M / 2 > 2 + 4/β`.
pub fn default_lyapunov_m(beta: f64) -> f64 {
    2.0 * (2.0 + 4.0 / beta) / beta * (1.0 + 1e-9)
}

/// Constants for the ensemble functional given the observable dissipation
/// constants `(β, K_h)` of the signal, ensemble size and observation
/// dimension `q`.
pub fn lyapunov_constants(
    kind: FilterKind,
    beta: f64,
    k_h: f64,
    ensemble_size: usize,
    q: usize,
    m: Option<f64>,
) -> Result<LyapunovConstants> {
    if !(beta > 0.0 && beta < 1.0) || !(k_h >= 0.0) || !k_h.is_finite() {
        return Err(invalid(format!(
            "need 0 < beta < 1 and finite K >= 0, got ({beta}, {k_h})"
        )));
    }
    let m = m.unwrap_or_else(|| default_lyapunov_m(beta));
    if !(0.5 * beta * m > 2.0 + 4.0 / beta) {
        return Err(invalid(format!("M = {m} is too small for beta = {beta}")));
    }
    let kk = ensemble_size as f64;
    let q = q as f64;
    let tail = |k_eff: f64| {
        (1.0 + 0.5 * beta) * k_eff + 2.0 * (1.0 + 2.0 / beta) * (k_h + 2.0 * q) + m * k_h
    };
    Ok(match kind {
        FilterKind::Enkf => LyapunovConstants {
            rate: 0.5 * beta,
            constant: kk * tail(k_h),
            m,
        },
        FilterKind::Etkf | FilterKind::Eakf => LyapunovConstants {
            rate: 0.25 * beta,
            constant: kk * tail(k_h + q) + (1.0 + 4.0 / beta) * q,
            m,
        },
    })
}

/// `(1 − rate)ⁿ ℰ₀ + constant / rate`.
pub fn gronwall_ceiling(c: &LyapunovConstants, e0: f64, n: usize) -> f64 {
    (1.0 - c.rate).powf(n as f64) * e0 + c.constant / c.rate
}

/// `(1 − β̂)ⁿ ℰ₀ + K̂/β̂` for the signal alone.
pub fn signal_ceiling(beta: f64, k: f64, e0: f64, n: usize) -> f64 {
    (1.0 - beta).powf(n as f64) * e0 + k / beta
}

/// Energies recorded after each assimilation cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialStep {
    /// `|U_n|²`.
    pub signal: f64,
    /// `Σₖ |V⁽ᵏ⁾_n|²`.
    pub ensemble: f64,
    /// `Σₖ |HV⁽ᵏ⁾_n|² + K·M·|HU_n|²`.
    pub lyapunov: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub kind: FilterKind,
    pub replicate: u64,
    pub initial: TrialStep,
    /// One entry per completed cycle; shorter than the horizon only when
    /// `diverged` is set.
    pub steps: Vec<TrialStep>,
    pub running_max: f64,
    pub diverged: bool,
    pub divergence_member: Option<usize>,
    /// `min λ(I − HCₙHᵀ)` over all cycles (square-root filters only).
    pub min_contraction_margin: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrialSetup<'a> {
    pub kind: FilterKind,
    pub model: &'a ModelSpec,
    pub op: &'a ObservationOperator,
    pub scheme: InflationScheme,
    pub horizon: usize,
    pub lyapunov_m: f64,
    pub key: StreamKey,
}

/// Signal start plus an ensemble scattered around it with standard
/// deviation `spread`.
pub fn initial_condition(
    signal: &DVector<f64>,
    ensemble_size: usize,
    offset: &DVector<f64>,
    spread: f64,
    key: &StreamKey,
) -> Result<Ensemble> {
    if ensemble_size < 2 {
        return Err(Error::TooFewMembers(ensemble_size));
    }
    if offset.len() != signal.len() {
        return Err(invalid("offset must match the signal dimension"));
    }
    let cols: Vec<DVector<f64>> = (0..ensemble_size)
        .map(|k| {
            let mut rng = key.rng(0, k as u64, Role::Init);
            signal + offset + standard_normal_vector(&mut rng, signal.len()) * spread
        })
        .collect();
    Ensemble::from_columns(&cols)
}

fn trial_step(
    op: &ObservationOperator,
    m: f64,
    ens: &Ensemble,
    signal: &DVector<f64>,
) -> TrialStep {
    let h = op.matrix();
    let hv = h * ens.members();
    let hu = h * signal;
    TrialStep {
        signal: signal.norm_squared(),
        ensemble: ens.members().norm_squared(),
        lyapunov: hv.norm_squared() + ens.size() as f64 * m * hu.norm_squared(),
    }
}

/// `min λ(I − HCHᵀ)`, computed on whichever Gram matrix is smaller.
pub fn contraction_margin(op: &ObservationOperator, ens: &Ensemble) -> Result<f64> {
    let hs = op.matrix() * ens.moments().spread;
    let scale = 1.0 / (ens.size() - 1) as f64;
    let gram = if hs.nrows() <= hs.ncols() {
        &hs * hs.transpose() * scale
    } else {
        hs.transpose() * &hs * scale
    };
    let top = sym_eig_desc(&gram)?.values[0];
    Ok(1.0 - top)
}

/// Runs the filter for `setup.horizon` cycles from the given start.
/// Blow-up ends the trial and is recorded, not returned as an error.
pub fn boundedness_trial(
    setup: &TrialSetup<'_>,
    signal0: &DVector<f64>,
    ensemble0: &Ensemble,
) -> Result<TrialRecord> {
    let mut signal = signal0.clone();
    let mut ens = ensemble0.clone();
    let initial = trial_step(setup.op, setup.lyapunov_m, &ens, &signal);
    let mut rec = TrialRecord {
        kind: setup.kind,
        replicate: setup.key.replicate,
        initial,
        steps: Vec::with_capacity(setup.horizon),
        running_max: initial.lyapunov,
        diverged: false,
        divergence_member: None,
        min_contraction_margin: setup.kind.is_square_root().then_some(f64::INFINITY),
    };
    for n in 1..=setup.horizon as u64 {
        let out = crate::filters::filter_step(
            setup.kind,
            setup.model,
            setup.op,
            &ens,
            &signal,
            &setup.key,
            n,
            setup.scheme,
        );
        match out {
            Ok(o) => {
                ens = o.ensemble;
                signal = o.signal;
            }
            Err(Error::NumericalBlowup { member, .. }) => {
                rec.diverged = true;
                rec.divergence_member = member;
                break;
            }
            Err(e) => return Err(e),
        }
        if ens.members().iter().any(|x| !x.is_finite()) {
            rec.diverged = true;
            break;
        }
        let s = trial_step(setup.op, setup.lyapunov_m, &ens, &signal);
        rec.running_max = rec.running_max.max(s.lyapunov);
        rec.steps.push(s);
        if let Some(margin) = rec.min_contraction_margin.as_mut() {
            *margin = margin.min(contraction_margin(setup.op, &ens)?);
        }
    }
    Ok(rec)
}

/// Mean of `xs[start..]` with a batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub mean: f64,
    pub std_error: f64,
    pub len: usize,
}

pub fn window_stats(xs: &[f64], start: usize, batches: usize) -> Result<WindowStats> {
    let w = xs.get(start..).unwrap_or(&[]);
    if w.len() < 2 * batches.max(2) {
        return Err(invalid("window too short for batch means"));
    }
    let b = batches.max(2);
    let size = w.len() / b;
    let means: Vec<f64> = (0..b)
        .map(|i| w[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let bm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (b - 1) as f64;
    Ok(WindowStats {
        mean,
        std_error: (var / b as f64).sqrt(),
        len: w.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLossRecord {
    /// `Dₙ` for `n = 0..=horizon`.
    pub distances: Vec<f64>,
    /// Histogram TV between the two replicas' first coordinates, per step.
    pub tv_proxy: Vec<f64>,
    /// Energies of the signal and the `μ` replica, per step.
    pub energies: Vec<TrialStep>,
    pub diverged: bool,
}

/// `|V̄^μ − V̄^ν| + ‖C^μ − C^ν‖_F`.
pub fn coupled_distance(a: &Ensemble, b: &Ensemble) -> f64 {
    let ma = a.moments();
    let mb = b.moments();
    (ma.mean - mb.mean).norm() + (ma.covariance - mb.covariance).norm()
}

/// Two replicas driven by one signal, one observation sequence and the same
/// member-indexed noise draws.
pub fn memory_loss_trial(
    setup: &TrialSetup<'_>,
    signal0: &DVector<f64>,
    mu: &Ensemble,
    nu: &Ensemble,
) -> Result<MemoryLossRecord> {
    if mu.size() != nu.size() || mu.dim() != nu.dim() {
        return Err(invalid("coupled replicas need equal ensemble shapes"));
    }
    let TrialSetup {
        kind,
        model,
        op,
        scheme,
        horizon,
        lyapunov_m,
        ref key,
    } = *setup;
    let mut signal = signal0.clone();
    let mut a = mu.clone();
    let mut b = nu.clone();
    let mut rec = MemoryLossRecord {
        distances: vec![coupled_distance(&a, &b)],
        tv_proxy: vec![first_coordinate_tv(&a, &b)],
        energies: vec![trial_step(op, lyapunov_m, &a, &signal)],
        diverged: false,
    };
    for n in 1..=horizon as u64 {
        let cycle = |ens: &Ensemble, z: &DVector<f64>| -> Result<Ensemble> {
            let f = forecast_ensemble(model, ens, key, n)?;
            analysis(kind, &f, z, op, scheme, key, n)
        };
        let step = model
            .forecast(&signal, &mut key.rng(n, 0, Role::Signal))
            .and_then(|s| {
                let z = op.observe(&s, &mut key.rng(n, 0, Role::Observation))?;
                Ok((s, z))
            });
        let (s, z) = match step {
            Ok(v) => v,
            Err(Error::NumericalBlowup { .. }) => {
                rec.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        match (cycle(&a, &z), cycle(&b, &z)) {
            (Ok(na), Ok(nb)) => {
                a = na;
                b = nb;
            }
            (Err(Error::NumericalBlowup { .. }), _) | (_, Err(Error::NumericalBlowup { .. })) => {
                rec.diverged = true;
                break;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
        signal = s;
        rec.distances.push(coupled_distance(&a, &b));
        rec.tv_proxy.push(first_coordinate_tv(&a, &b));
        rec.energies.push(trial_step(op, lyapunov_m, &a, &signal));
    }
    Ok(rec)
}

fn first_coordinate_tv(a: &Ensemble, b: &Ensemble) -> f64 {
    let xa: Vec<f64> = a.members().row(0).iter().copied().collect();
    let xb: Vec<f64> = b.members().row(0).iter().copied().collect();
    histogram_tv(&xa, &xb)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Total variation between the empirical histograms of two samples on a
/// shared grid with Freedman–Diaconis bin width.
pub fn histogram_tv(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut pooled: Vec<f64> = a
        .iter()
        .chain(b)
        .copied()
        .filter(|x| x.is_finite())
        .collect();
    if pooled.is_empty() {
        return 0.0;
    }
    pooled.sort_by(f64::total_cmp);
    let lo = pooled[0];
    let hi = pooled[pooled.len() - 1];
    if hi == lo {
        return 0.0;
    }
    let iqr = quantile(&pooled, 0.75) - quantile(&pooled, 0.25);
    let n = pooled.len() as f64;
    let mut width = 2.0 * iqr / n.cbrt();
    if !(width > 0.0) {
        width = (hi - lo) / n.sqrt().ceil();
    }
    let bins = (((hi - lo) / width).ceil() as usize).clamp(1, 10_000);
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs.iter().filter(|x| x.is_finite()) {
            let i = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[i.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Log-linear fit `log Dₙ ≈ c + n log γ` over the pre-floor window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub gamma: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Steps `[start, end)` used by the fit.
    pub start: usize,
    pub end: usize,
}

/// The window runs from step 0 until `Dₙ` first drops below
/// `floor_rel · D₀`. Returns `None` if fewer than three usable points exist.
pub fn fit_decay(distances: &[f64], floor_rel: f64) -> Option<DecayFit> {
    let d0 = *distances.first()?;
    if !(d0 > 0.0) || !d0.is_finite() {
        return None;
    }
    let floor = (floor_rel * d0).max(f64::MIN_POSITIVE);
    let end = distances
        .iter()
        .position(|&x| !(x > floor) || !x.is_finite())
        .unwrap_or(distances.len());
    if end < 3 {
        return None;
    }
    let xs: Vec<f64> = (0..end).map(|i| i as f64).collect();
    let ys: Vec<f64> = distances[..end].iter().map(|d| d.ln()).collect();
    let n = end as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    Some(DecayFit {
        gamma: slope.exp(),
        slope,
        intercept,
        r_squared,
        start: 0,
        end,
    })
}

/// A forecast spread and an observation matrix for the covariance audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditInstance {
    pub spread: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub label: &'static str,
}

/// `Ŝ = [[1, −1], [0, 0]]` with `H = 0`.
pub fn rank_deficient_zero_h_instance() -> AuditInstance {
    AuditInstance {
        spread: DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]),
        h: DMatrix::zeros(2, 2),
        label: "rank-deficient spread, zero H",
    }
}

/// Deterministic instance `index` of the audit family. Instance 0 is
/// [`rank_deficient_zero_h_instance`]; the rest cycle through ensemble
/// shapes `K < d`, `K = d`, `K > d` and dense, diagonal, rank-deficient and
/// zero observation matrices.
pub fn audit_instance(index: usize, key: &StreamKey) -> AuditInstance {
    if index == 0 {
        return rank_deficient_zero_h_instance();
    }
    let mut rng = key.rng(index as u64, 0, Role::Instance);
    let (d, k) = match index % 3 {
        0 => {
            let d = rng.random_range(3..=7);
            (d, rng.random_range(2..d))
        }
        1 => {
            let d = rng.random_range(2..=6);
            (d, d)
        }
        _ => {
            let d = rng.random_range(1..=5);
            (d, rng.random_range(d + 1..=d + 5))
        }
    };
    let scale = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    let mut members = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    if rng.random_bool(0.25) && d > 1 {
        // Collapse the ensemble onto a lower-dimensional subspace.
        let r = rng.random_range(1..d);
        let basis = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let coeffs = DMatrix::from_fn(r, k, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        members = basis * coeffs;
    }
    let mean = members.column_mean();
    let mut spread = members;
    for mut c in spread.column_iter_mut() {
        c -= &mean;
    }
    let q = rng.random_range(1..=d);
    let (h, label) = match (index / 3) % 4 {
        0 => (
            DMatrix::from_fn(q, d, |_, _| rng.random_range(-2.0..2.0)),
            "dense H",
        ),
        1 => {
            let mut diag: Vec<f64> = (0..q).map(|_| rng.random_range(0.1..3.0)).collect();
            diag.sort_by(|a, b| b.total_cmp(a));
            (
                DMatrix::from_fn(q, d, |i, j| if i == j { diag[i] } else { 0.0 }),
                "diagonal H",
            )
        }
        2 => {
            let row = DMatrix::from_fn(1, d, |_, _| rng.random_range(-2.0..2.0));
            let q = q.max(2);
            (
                DMatrix::from_fn(q, d, |i, j| row[(0, j)] * (i + 1) as f64),
                "rank-deficient H",
            )
        }
        _ => (DMatrix::zeros(q, d), "zero H"),
    };
    AuditInstance { spread, h, label }
}

/// `Ĉ − ĈHᵀ(HĈHᵀ + I)⁻¹HĈ` with `Ĉ = ŜŜᵀ/(K−1)`.
pub fn kalman_posterior_covariance(
    spread: &DMatrix<f64>,
    h: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let k = spread.ncols();
    if k < 2 {
        return Err(Error::TooFewMembers(k));
    }
    let c = spread * spread.transpose() / (k - 1) as f64;
    let hc = h * &c;
    let s = &hc * h.transpose() + DMatrix::identity(h.nrows(), h.nrows());
    Ok(&c - hc.transpose() * spd_solve(&s, &hc)?)
}

/// Frobenius residual of the square-root posterior covariance.
pub fn covariance_residual(kind: FilterKind, inst: &AuditInstance) -> Result<f64> {
    let s = match kind {
        FilterKind::Etkf => etkf_spread(&inst.spread, &inst.h)?,
        FilterKind::Eakf => eakf_spread(&inst.spread, &inst.h)?,
        FilterKind::Enkf => return Err(invalid("the EnKF identity holds only on average")),
    };
    let k = inst.spread.ncols();
    let post = &s * s.transpose() / (k - 1) as f64;
    Ok((post - kalman_posterior_covariance(&inst.spread, &inst.h)?).norm())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceAudit {
    pub kind: FilterKind,
    pub count: usize,
    pub max_residual: f64,
    pub worst_index: usize,
}

/// Maximum covariance-identity residual over `count` audit instances.
pub fn covariance_identity_audit(
    kind: FilterKind,
    count: usize,
    key: &StreamKey,
) -> Result<CovarianceAudit> {
    if !kind.is_square_root() {
        return Err(invalid(
            "use enkf_averaged_audit for the perturbed-observation filter",
        ));
    }
    let mut audit = CovarianceAudit {
        kind,
        count,
        max_residual: 0.0,
        worst_index: 0,
    };
    for i in 0..count {
        let r = covariance_residual(kind, &audit_instance(i, key))?;
        if !r.is_finite() {
            return Err(Error::AuditFailed(format!(
                "non-finite residual at instance {i}"
            )));
        }
        if r > audit.max_residual {
            audit.max_residual = r;
            audit.worst_index = i;
        }
    }
    Ok(audit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedAudit {
    pub draws: usize,
    /// `‖mean posterior covariance − Kalman covariance‖_F`.
    pub residual_norm: f64,
    /// `3·sqrt(Σ seᵢⱼ²)`.
    pub bound: f64,
    pub passed: bool,
}

/// EnKF posterior covariance averaged over perturbed-observation draws on
/// a fixed instance (`d = 3`, `K = 5`, `q = 2`).
pub fn enkf_averaged_audit(draws: usize, key: &StreamKey) -> Result<AveragedAudit> {
    if draws < 2 {
        return Err(invalid("need at least two draws"));
    }
    let members = DMatrix::from_row_slice(
        3,
        5,
        &[
            1.0, -0.5, 0.3, 2.0, -1.2, //
            0.4, 0.9, -1.1, 0.2, 0.6, //
            -0.7, 0.1, 0.8, -0.3, 1.5,
        ],
    );
    let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, -1.0, 2.0]);
    let op = ObservationOperator::new(h.clone())?;
    let forecast = Ensemble::new(members)?;
    let z = DVector::from_vec(vec![0.3, -0.8]);
    let oracle = kalman_posterior_covariance(&forecast.moments().spread, &h)?;
    let (d, k) = (forecast.dim(), forecast.size());
    let mut mean = DMatrix::zeros(d, d);
    let mut m2 = DMatrix::zeros(d, d);
    for j in 0..draws {
        let xi = DMatrix::from_columns(
            &(0..k)
                .map(|m| {
                    standard_normal_vector(
                        &mut key.rng(j as u64, m as u64, Role::Perturbation),
                        op.q(),
                    )
                })
                .collect::<Vec<_>>(),
        );
        let post = crate::filters::enkf_analysis_with_perturbations(
            &forecast,
            &z,
            &op,
            &xi,
            InflationScheme::None,
        )?;
        let c = post.moments().covariance;
        // Welford update, entrywise.
        let delta = &c - &mean;
        mean += &delta / (j + 1) as f64;
        m2 += delta.component_mul(&(&c - &mean));
    }
    let n = draws as f64;
    let se2: f64 = m2.iter().map(|v| v / (n - 1.0) / n).sum();
    let residual_norm = (mean - oracle).norm();
    let bound = 3.0 * se2.sqrt();
    Ok(AveragedAudit {
        draws,
        residual_norm,
        bound,
        passed: residual_norm <= bound,
    })
}
