//! Linear observation operators `Z = H U + ξ`, `ξ ~ N(0, I_q)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::{svd_desc, sym_eig_desc, EPS_RANK};
use crate::rng::standard_normal_vector;

/// Observation matrix `H` (q×d) with independent rows. Noise is standard
/// normal in these coordinates; use [`whiten_and_reduce`] to get here from a
/// general noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationOperator {
    h: DMatrix<f64>,
    noise_free: bool,
}

impl ObservationOperator {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        let (q, d) = h.shape();
        if q == 0 || d == 0 {
            return Err(invalid("observation matrix must be non-empty"));
        }
        if q > d {
            return Err(invalid(format!("q = {q} exceeds d = {d}")));
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(invalid("observation matrix has non-finite entries"));
        }
        let rank = svd_desc(&h, EPS_RANK)?.rank;
        if rank < q {
            return Err(Error::RankDeficient { rank, required: q });
        }
        Ok(Self {
            h,
            noise_free: false,
        })
    }

    /// Observe the coordinates with nonzero weight: `diag = (0, 1, 1)` gives
    /// the 2×3 operator picking `y` and `z`.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let rows: Vec<usize> = (0..diag.len()).filter(|&i| diag[i] != 0.0).collect();
        let h = DMatrix::from_fn(rows.len(), diag.len(), |r, c| {
            if rows[r] == c {
                diag[c]
            } else {
                0.0
            }
        });
        Self::new(h)
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::new(DMatrix::identity(d, d))
    }

    /// The first `q` coordinates.
    pub fn first_q(d: usize, q: usize) -> Result<Self> {
        if q > d {
            return Err(invalid(format!("q = {q} exceeds d = {d}")));
        }
        Self::new(DMatrix::from_fn(
            q,
            d,
            |r, c| if r == c { 1.0 } else { 0.0 },
        ))
    }

    /// Coordinates `0, stride, 2·stride, …`.
    pub fn every_nth(d: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        let idx: Vec<usize> = (0..d).step_by(stride).collect();
        Self::new(DMatrix::from_fn(idx.len(), d, |r, c| {
            if idx[r] == c {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Deterministic mode: `observe` returns `H u` exactly.
    pub fn noise_free(mut self) -> Self {
        self.noise_free = true;
        self
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> usize {
        self.h.nrows()
    }

    pub fn d(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.q() == self.d()
    }

    pub fn is_noise_free(&self) -> bool {
        self.noise_free
    }

    pub fn apply(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.d() {
            return Err(invalid(format!(
                "state has dimension {}, H expects {}",
                u.len(),
                self.d()
            )));
        }
        Ok(&self.h * u)
    }

    pub fn observe<R: Rng + ?Sized>(&self, u: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let hu = self.apply(u)?;
        if self.noise_free {
            return Ok(hu);
        }
        Ok(hu + standard_normal_vector(rng, self.q()))
    }

    /// `σ_max(H) / σ_min(H)`; only defined when `H` is invertible.
    pub fn condition_number(&self) -> Result<f64> {
        let svd = svd_desc(&self.h, EPS_RANK)?;
        if svd.rank < self.d() {
            return Err(Error::RankDeficient {
                rank: svd.rank,
                required: self.d(),
            });
        }
        Ok(svd.values[0] / svd.values[self.d() - 1])
    }
}

/// Whether `(1 − β_h) 𝒞_H² < 1`, under which kinetic dissipation carries
/// over to the observable energy.
pub fn full_rank_sufficiency(beta_h: f64, condition: f64) -> Result<bool> {
    if !(beta_h > 0.0 && beta_h < 1.0) {
        return Err(invalid(format!("beta_h must lie in (0, 1), got {beta_h}")));
    }
    if !(condition >= 1.0) || !condition.is_finite() {
        return Err(invalid(format!(
            "condition number must be >= 1, got {condition}"
        )));
    }
    Ok((1.0 - beta_h) * condition * condition < 1.0)
}

/// Change of variables `Ũ = Ψᵀ U`, `Z̃ = Φᵀ Γ^{-1/2} Z` built from the SVD
/// `Γ^{-1/2} H = Φ Λ Ψᵀ`. Rows of `Z̃` with `Λ = 0` are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateChange {
    /// `Ψᵀ`, d×d orthogonal.
    pub state_map: DMatrix<f64>,
    /// First `r` rows of `Φᵀ Γ^{-1/2}`.
    pub obs_map: DMatrix<f64>,
    /// Nonzero singular values, non-increasing.
    pub lambda: DVector<f64>,
}

impl CoordinateChange {
    /// `H̃ = [diag(Λ) 0]`, r×d.
    pub fn reduced_matrix(&self) -> DMatrix<f64> {
        let r = self.lambda.len();
        let d = self.state_map.nrows();
        DMatrix::from_fn(r, d, |i, j| if i == j { self.lambda[i] } else { 0.0 })
    }

    pub fn reduced_operator(&self) -> Result<ObservationOperator> {
        ObservationOperator::new(self.reduced_matrix())
    }

    pub fn to_reduced_state(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.state_map * u
    }

    pub fn from_reduced_state(&self, u: &DVector<f64>) -> DVector<f64> {
        self.state_map.transpose() * u
    }

    pub fn to_reduced_obs(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.obs_map * z
    }

    /// `Ψᵀ C Ψ`.
    pub fn to_reduced_cov(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        &self.state_map * c * self.state_map.transpose()
    }

    pub fn from_reduced_cov(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        self.state_map.transpose() * c * &self.state_map
    }
}

pub fn whiten_and_reduce(h_raw: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<CoordinateChange> {
    let q = h_raw.nrows();
    if gamma.shape() != (q, q) {
        return Err(invalid(format!(
            "Γ must be {q}x{q}, got {:?}",
            gamma.shape()
        )));
    }
    if h_raw.iter().chain(gamma.iter()).any(|x| !x.is_finite()) {
        return Err(invalid("non-finite entries"));
    }
    if (gamma - gamma.transpose()).norm() > 1e-12 * (1.0 + gamma.norm()) {
        return Err(invalid("Γ must be symmetric"));
    }
    let eig = sym_eig_desc(gamma)?;
    let top = eig.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if q > 0 && eig.values[q - 1] <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularObservationNoise);
    }
    let gamma_inv_sqrt = eig.map_values(|x| 1.0 / x.sqrt());
    let svd = svd_desc(&(&gamma_inv_sqrt * h_raw), EPS_RANK)?;
    let r = svd.rank;
    let obs_full = svd.left.transpose() * gamma_inv_sqrt;
    Ok(CoordinateChange {
        state_map: svd.right.clone(),
        obs_map: obs_full.rows(0, r).into_owned(),
        lambda: svd.values.rows(0, r).into_owned(),
    })
}
