//! Ensemble analysis updates and the forecast/analysis cycle.
//!
//! All three filters work with identity observation noise; see
//! [`crate::observations::whiten_and_reduce`] for general `Γ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::models::ModelSpec;
use crate::numerics::{spd_solve, svd_desc, svd_range, svd_right, EPS_RANK};
use crate::observations::ObservationOperator;
use crate::rng::{standard_normal_vector, Role, StreamKey};

/// K members stored as the columns of a d×K matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    /// Centered members `Ŝ`, d×K.
    pub spread: DMatrix<f64>,
    /// `(K−1)⁻¹ Ŝ Ŝᵀ`.
    pub covariance: DMatrix<f64>,
}

pub fn ensemble_moments(members: &DMatrix<f64>) -> Result<Moments> {
    let k = members.ncols();
    if k < 2 {
        return Err(Error::TooFewMembers(k));
    }
    let mean = members.column_mean();
    let mut spread = members.clone();
    for mut col in spread.column_iter_mut() {
        col -= &mean;
    }
    let covariance = &spread * spread.transpose() / (k - 1) as f64;
    Ok(Moments {
        mean,
        spread,
        covariance,
    })
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::TooFewMembers(members.ncols()));
        }
        if members.nrows() == 0 {
            return Err(invalid("ensemble members must have positive dimension"));
        }
        if members.iter().any(|x| !x.is_finite()) {
            return Err(invalid("ensemble has non-finite entries"));
        }
        Ok(Self { members })
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        if cols.len() < 2 {
            return Err(Error::TooFewMembers(cols.len()));
        }
        let d = cols[0].len();
        if cols.iter().any(|c| c.len() != d) {
            return Err(invalid("members have differing dimensions"));
        }
        Self::new(DMatrix::from_columns(cols))
    }

    /// Members `mean + spread[:, k]`.
    pub fn from_mean_spread(mean: &DVector<f64>, spread: &DMatrix<f64>) -> Result<Self> {
        if spread.nrows() != mean.len() {
            return Err(invalid("mean and spread dimensions differ"));
        }
        let mut members = spread.clone();
        for mut col in members.column_iter_mut() {
            col += mean;
        }
        Self::new(members)
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, k: usize) -> DVector<f64> {
        self.members.column(k).into_owned()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn moments(&self) -> Moments {
        ensemble_moments(&self.members).expect("ensemble holds at least two members")
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterKind {
    Enkf,
    Etkf,
    Eakf,
}

impl FilterKind {
    pub fn is_square_root(self) -> bool {
        !matches!(self, FilterKind::Enkf)
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Enkf => "enkf",
            FilterKind::Etkf => "etkf",
            FilterKind::Eakf => "eakf",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enkf" => Ok(FilterKind::Enkf),
            "etkf" => Ok(FilterKind::Etkf),
            "eakf" => Ok(FilterKind::Eakf),
            other => Err(invalid(format!("unknown filter '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InflationScheme {
    #[default]
    None,
    /// `Ĉ + λI`.
    Additive(f64),
    /// `(1 + λ)Ĉ`.
    Uniform(f64),
}

impl InflationScheme {
    fn validate(self, kind: FilterKind) -> Result<()> {
        match self {
            InflationScheme::None => Ok(()),
            InflationScheme::Additive(l) | InflationScheme::Uniform(l)
                if !(l >= 0.0) || !l.is_finite() =>
            {
                Err(invalid(format!(
                    "inflation parameter must be finite and >= 0, got {l}"
                )))
            }
            InflationScheme::Additive(_) if kind.is_square_root() => {
                Err(Error::UnsupportedInflation)
            }
            _ => Ok(()),
        }
    }
}

pub fn inflate(
    c: &DMatrix<f64>,
    scheme: InflationScheme,
    kind: FilterKind,
) -> Result<DMatrix<f64>> {
    scheme.validate(kind)?;
    Ok(match scheme {
        InflationScheme::None => c.clone(),
        InflationScheme::Additive(l) => c + DMatrix::identity(c.nrows(), c.ncols()) * l,
        InflationScheme::Uniform(l) => c * (1.0 + l),
    })
}

fn check_obs(forecast: &Ensemble, z: &DVector<f64>, op: &ObservationOperator) -> Result<()> {
    if op.d() != forecast.dim() {
        return Err(invalid(format!(
            "H expects dimension {}, ensemble has {}",
            op.d(),
            forecast.dim()
        )));
    }
    if z.len() != op.q() {
        return Err(invalid(format!(
            "observation has length {}, expected {}",
            z.len(),
            op.q()
        )));
    }
    if z.iter().any(|x| !x.is_finite()) {
        return Err(invalid("observation has non-finite entries"));
    }
    Ok(())
}

/// `v − C Hᵀ (I + H C Hᵀ)⁻¹ (H v − z)` applied columnwise to `innov = H v − z`.
fn kalman_correction(
    c: &DMatrix<f64>,
    h: &DMatrix<f64>,
    innov: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let hc = h * c;
    let q = h.nrows();
    let a = &hc * h.transpose() + DMatrix::identity(q, q);
    let x = spd_solve(&a, innov)?;
    Ok(hc.transpose() * x)
}

/// Posterior mean shared by both square-root filters.
pub fn mean_update(
    mean: &DVector<f64>,
    c: &DMatrix<f64>,
    z: &DVector<f64>,
    h: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let innov = h * mean - z;
    let corr = kalman_correction(
        c,
        h,
        &DMatrix::from_column_slice(innov.len(), 1, innov.as_slice()),
    )?;
    Ok(mean - corr.column(0))
}

/// Perturbed-observation EnKF; `perturbations` holds one q-vector per member.
pub fn enkf_analysis_with_perturbations(
    forecast: &Ensemble,
    z: &DVector<f64>,
    op: &ObservationOperator,
    perturbations: &DMatrix<f64>,
    scheme: InflationScheme,
) -> Result<Ensemble> {
    check_obs(forecast, z, op)?;
    if perturbations.shape() != (op.q(), forecast.size()) {
        return Err(invalid("perturbations must be q x K"));
    }
    let c = inflate(&forecast.moments().covariance, scheme, FilterKind::Enkf)?;
    let h = op.matrix();
    let mut innov = h * forecast.members() - perturbations;
    for mut col in innov.column_iter_mut() {
        col -= z;
    }
    let corr = kalman_correction(&c, h, &innov)?;
    Ensemble::new(forecast.members() - corr)
}

pub fn enkf_analysis<R: Rng + ?Sized>(
    forecast: &Ensemble,
    z: &DVector<f64>,
    op: &ObservationOperator,
    rng: &mut R,
    scheme: InflationScheme,
) -> Result<Ensemble> {
    let cols: Vec<DVector<f64>> = (0..forecast.size())
        .map(|_| standard_normal_vector(rng, op.q()))
        .collect();
    let xi = DMatrix::from_columns(&cols);
    enkf_analysis_with_perturbations(forecast, z, op, &xi, scheme)
}

fn uniform_factor(scheme: InflationScheme, kind: FilterKind) -> Result<f64> {
    scheme.validate(kind)?;
    Ok(match scheme {
        InflationScheme::Uniform(l) => (1.0 + l).sqrt(),
        _ => 1.0,
    })
}

/// `Ŝ (I + (K−1)⁻¹ ŜᵀHᵀHŜ)^{-1/2}`.
pub fn etkf_spread(spread: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = spread.ncols();
    if k < 2 {
        return Err(Error::TooFewMembers(k));
    }
    // T = V(I + Σ²)^{-1/2}Vᵀ from the SVD of HŜ/√(K−1), written as I + V₁(F − I)V₁ᵀ
    // so the Gram matrix (and its squared conditioning) never appears.
    let (_, values, v1) = svd_range(&(h * spread / ((k - 1) as f64).sqrt()), 0.0)?;
    let shrink = DMatrix::from_diagonal(&values.map(|x| 1.0 / (1.0 + x * x).sqrt() - 1.0));
    Ok(spread + (spread * v1.transpose()) * shrink * v1)
}

/// Adjustment on the numerical range of `Ŝ = QΛR`:
/// `S = Q₁Λ₁G₁ᵀ(I + D₁)^{-1/2}R₁` where `G₁ᵀD₁G₁ = (K−1)⁻¹Λ₁Q₁ᵀHᵀHQ₁Λ₁`.
pub fn eakf_spread(spread: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (d, k) = spread.shape();
    if k < 2 {
        return Err(Error::TooFewMembers(k));
    }
    let (q1, lam1, r1) = svd_range(spread, EPS_RANK)?;
    if lam1.is_empty() {
        return Ok(DMatrix::zeros(d, k));
    }
    let lam1 = DMatrix::from_diagonal(&lam1);
    // G₁ and D₁ come from the SVD of HQ₁Λ₁/√(K−1) rather than its Gram matrix.
    let (values, mut g) = svd_right(&(h * &q1 * &lam1 / ((k - 1) as f64).sqrt()))?;
    let r = g.nrows();
    for mut row in g.row_iter_mut() {
        let pivot = row
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, x)| {
                if x.abs() > best.1 {
                    (i, x.abs())
                } else {
                    best
                }
            })
            .0;
        if row[pivot] < 0.0 {
            row.neg_mut();
        }
    }
    let scale = DMatrix::from_fn(r, r, |i, j| match values.get(i) {
        Some(x) if i == j => 1.0 / (1.0 + x * x).sqrt(),
        None if i == j => 1.0,
        _ => 0.0,
    });
    Ok(q1 * lam1 * g.transpose() * scale * r1)
}

/// Full-size textbook form `S = QΛGᵀ(I + D)^{-1/2}Λ†QᵀŜ` with a caller-chosen
/// orthogonal `G` (rows are eigenvectors of `(K−1)⁻¹ΛᵀQᵀHᵀHQΛ`). Only the
/// block-structured choice of `G` is correct when `Ŝ` is rank deficient.
pub fn eakf_spread_with_basis(
    spread: &DMatrix<f64>,
    h: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (d, k) = spread.shape();
    if k < 2 {
        return Err(Error::TooFewMembers(k));
    }
    if g.shape() != (k, k) {
        return Err(invalid("basis must be K x K"));
    }
    if (g * g.transpose() - DMatrix::identity(k, k)).norm() > 1e-10 {
        return Err(invalid("basis is not orthogonal"));
    }
    let svd = svd_desc(spread, EPS_RANK)?;
    let sigma = svd.sigma();
    let hq = h * &svd.left;
    let m = sigma.transpose() * hq.transpose() * &hq * &sigma / (k - 1) as f64;
    let dmat = g * m * g.transpose();
    let off = &dmat - DMatrix::from_diagonal(&dmat.diagonal());
    if off.norm() > 1e-10 * (1.0 + dmat.norm()) {
        return Err(invalid("basis does not diagonalize the update matrix"));
    }
    let scale = DMatrix::from_diagonal(&dmat.diagonal().map(|x| 1.0 / (1.0 + x.max(0.0)).sqrt()));
    let pinv = DMatrix::from_fn(k, d, |i, j| {
        if i == j && i < svd.rank {
            1.0 / svd.values[i]
        } else {
            0.0
        }
    });
    Ok(&svd.left * sigma * g.transpose() * scale * pinv * svd.left.transpose() * spread)
}

fn sqrt_analysis(
    forecast: &Ensemble,
    z: &DVector<f64>,
    op: &ObservationOperator,
    scheme: InflationScheme,
    kind: FilterKind,
) -> Result<Ensemble> {
    check_obs(forecast, z, op)?;
    let factor = uniform_factor(scheme, kind)?;
    let mom = forecast.moments();
    let spread = mom.spread * factor;
    let c = mom.covariance * (factor * factor);
    let h = op.matrix();
    let mean = mean_update(&mom.mean, &c, z, h)?;
    let s = match kind {
        FilterKind::Etkf => etkf_spread(&spread, h)?,
        _ => eakf_spread(&spread, h)?,
    };
    Ensemble::from_mean_spread(&mean, &s)
}

pub fn etkf_analysis(
    forecast: &Ensemble,
    z: &DVector<f64>,
    op: &ObservationOperator,
    scheme: InflationScheme,
) -> Result<Ensemble> {
    sqrt_analysis(forecast, z, op, scheme, FilterKind::Etkf)
}

pub fn eakf_analysis(
    forecast: &Ensemble,
    z: &DVector<f64>,
    op: &ObservationOperator,
    scheme: InflationScheme,
) -> Result<Ensemble> {
    sqrt_analysis(forecast, z, op, scheme, FilterKind::Eakf)
}

/// Analysis with perturbations drawn from keyed streams `(step, member)`.
pub fn analysis(
    kind: FilterKind,
    forecast: &Ensemble,
    z: &DVector<f64>,
    op: &ObservationOperator,
    scheme: InflationScheme,
    key: &StreamKey,
    step: u64,
) -> Result<Ensemble> {
    match kind {
        FilterKind::Enkf => {
            let cols: Vec<DVector<f64>> = (0..forecast.size())
                .map(|k| {
                    standard_normal_vector(&mut key.rng(step, k as u64, Role::Perturbation), op.q())
                })
                .collect();
            enkf_analysis_with_perturbations(forecast, z, op, &DMatrix::from_columns(&cols), scheme)
        }
        FilterKind::Etkf => etkf_analysis(forecast, z, op, scheme),
        FilterKind::Eakf => eakf_analysis(forecast, z, op, scheme),
    }
}

/// Forecast every member with its own keyed noise stream.
pub fn forecast_ensemble(
    model: &ModelSpec,
    ensemble: &Ensemble,
    key: &StreamKey,
    step: u64,
) -> Result<Ensemble> {
    let run = |k: usize| -> Result<DVector<f64>> {
        let mut rng = key.rng(step, k as u64, Role::Forecast);
        model
            .forecast(&ensemble.member(k), &mut rng)
            .map_err(|e| tag_member(e, k))
    };
    #[cfg(feature = "parallel")]
    let cols: Vec<Result<DVector<f64>>> = {
        use rayon::prelude::*;
        (0..ensemble.size()).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let cols: Vec<Result<DVector<f64>>> = (0..ensemble.size()).map(run).collect();
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    Ensemble::from_columns(&cols)
}

fn tag_member(e: Error, k: usize) -> Error {
    match e {
        Error::NumericalBlowup {
            last_finite_state, ..
        } => Error::NumericalBlowup {
            member: Some(k),
            last_finite_state,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub ensemble: Ensemble,
    pub signal: DVector<f64>,
    pub observation: DVector<f64>,
}

/// One forecast/observe/analyse cycle. Every draw is keyed by
/// `(step, member, role)`, so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn filter_step(
    kind: FilterKind,
    model: &ModelSpec,
    op: &ObservationOperator,
    ensemble: &Ensemble,
    signal: &DVector<f64>,
    key: &StreamKey,
    step: u64,
    scheme: InflationScheme,
) -> Result<StepOutput> {
    if model.dim() != ensemble.dim() || model.dim() != signal.len() {
        return Err(invalid("model, ensemble and signal dimensions differ"));
    }
    let signal = model.forecast(signal, &mut key.rng(step, 0, Role::Signal))?;
    let observation = op.observe(&signal, &mut key.rng(step, 0, Role::Observation))?;
    let forecast = forecast_ensemble(model, ensemble, key, step)?;
    let ensemble = analysis(kind, &forecast, &observation, op, scheme, key, step)?;
    Ok(StepOutput {
        ensemble,
        signal,
        observation,
    })
}
