//! Signal models: the one-step forecast `U_n = Ψ_h(U_{n-1}) + ζ_n` obtained
//! by Euler–Maruyama integration of `du = ψ(u) dt + Σ dW` over one
//! observation interval, and the quadratic energy functionals used by the
//! dissipation checks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::numerics::{operator_norm, sym_eig_desc};

/// Any component above this magnitude aborts the trajectory.
pub const BLOWUP_THRESHOLD: f64 = 1e15;

pub type StateNoiseFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Diffusion factor `Σ` (d×m). The step noise covariance is `ΣΣᵀ·dt`.
#[derive(Clone)]
pub enum NoiseFactor {
    None,
    /// `Σ = s·I`.
    Isotropic(f64),
    Constant(DMatrix<f64>),
    StateDependent(Arc<StateNoiseFn>),
}

impl fmt::Debug for NoiseFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseFactor::None => write!(f, "None"),
            NoiseFactor::Isotropic(s) => write!(f, "Isotropic({s})"),
            NoiseFactor::Constant(m) => write!(f, "Constant({}x{})", m.nrows(), m.ncols()),
            NoiseFactor::StateDependent(_) => write!(f, "StateDependent"),
        }
    }
}

impl NoiseFactor {
    fn factor_at(&self, d: usize, u: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            NoiseFactor::None => None,
            NoiseFactor::Isotropic(s) => Some(DMatrix::identity(d, d) * *s),
            NoiseFactor::Constant(m) => Some(m.clone()),
            NoiseFactor::StateDependent(f) => Some(f(u)),
        }
    }

    /// `ΣΣᵀ` at `u`.
    pub fn covariance_rate(&self, d: usize, u: &DVector<f64>) -> DMatrix<f64> {
        match self.factor_at(d, u) {
            None => DMatrix::zeros(d, d),
            Some(s) => &s * s.transpose(),
        }
    }
}

/// Vector field of a signal model.
#[derive(Debug, Clone)]
pub enum Dynamics {
    Lorenz63 {
        sigma: f64,
        r: f64,
        b: f64,
    },
    Lorenz96 {
        forcing: f64,
    },
    TruncatedNs(NsGalerkin),
    /// Exact discrete-time map `u ↦ A u` (no integration).
    LinearMap {
        a: DMatrix<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    dynamics: Dynamics,
    dim: usize,
    noise: NoiseFactor,
    step: f64,
    substeps: usize,
    cubic_damping: f64,
}

impl ModelSpec {
    fn build(dynamics: Dynamics, dim: usize, step: f64, substeps: usize) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(invalid(format!("step must be positive, got {step}")));
        }
        if substeps == 0 {
            return Err(invalid("substeps must be at least 1"));
        }
        Ok(Self {
            dynamics,
            dim,
            noise: NoiseFactor::None,
            step,
            substeps,
            cubic_damping: 0.0,
        })
    }

    pub fn lorenz63(sigma: f64, r: f64, b: f64, step: f64, substeps: usize) -> Result<Self> {
        Self::build(Dynamics::Lorenz63 { sigma, r, b }, 3, step, substeps)
    }

    pub fn lorenz96(n: usize, forcing: f64, step: f64, substeps: usize) -> Result<Self> {
        if n < 4 {
            return Err(invalid(format!("Lorenz 96 needs N >= 4, got {n}")));
        }
        Self::build(Dynamics::Lorenz96 { forcing }, n, step, substeps)
    }

    /// Truncated stochastic Navier–Stokes with white forcing of amplitude
    /// `forcing[k]` on each retained mode (complex Wiener increments).
    pub fn truncated_ns(
        ns: NsGalerkin,
        forcing: &[f64],
        step: f64,
        substeps: usize,
    ) -> Result<Self> {
        if forcing.len() != ns.modes().len() {
            return Err(invalid(format!(
                "expected {} forcing amplitudes, got {}",
                ns.modes().len(),
                forcing.len()
            )));
        }
        let dim = ns.state_dim();
        let diag = DVector::from_fn(dim, |i, _| forcing[i / 2] / std::f64::consts::SQRT_2);
        let mut spec = Self::build(Dynamics::TruncatedNs(ns), dim, step, substeps)?;
        if forcing.iter().any(|&s| s != 0.0) {
            spec.noise = NoiseFactor::Constant(DMatrix::from_diagonal(&diag));
        }
        Ok(spec)
    }

    /// Linear model `U_n = A U_{n-1} + ζ_n`, `ζ_n ~ N(0, R)`, with
    /// `‖A‖ ≤ 1 − β` enforced.
    pub fn linear_contraction(
        a: DMatrix<f64>,
        beta: f64,
        noise_cov: &DMatrix<f64>,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(invalid("A must be square"));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid(format!("beta must lie in (0, 1), got {beta}")));
        }
        let norm = operator_norm(&a);
        if norm >= 1.0 {
            return Err(invalid(format!("‖A‖ = {norm} is not a contraction")));
        }
        if norm > 1.0 - beta + 1e-12 {
            return Err(invalid(format!(
                "‖A‖ = {norm} exceeds 1 - beta = {}",
                1.0 - beta
            )));
        }
        let d = a.nrows();
        if noise_cov.shape() != (d, d) {
            return Err(invalid("noise covariance must be d x d"));
        }
        let mut spec = Self::build(Dynamics::LinearMap { a }, d, 1.0, 1)?;
        if noise_cov.iter().any(|&x| x != 0.0) {
            spec.noise = NoiseFactor::Constant(psd_sqrt(noise_cov)?);
        }
        Ok(spec)
    }

    pub fn with_noise(mut self, noise: NoiseFactor) -> Result<Self> {
        match &noise {
            NoiseFactor::Isotropic(s) if !s.is_finite() => {
                return Err(invalid("noise scale must be finite"))
            }
            NoiseFactor::Constant(m) => {
                if m.nrows() != self.dim {
                    return Err(invalid(format!(
                        "noise factor needs {} rows, got {}",
                        self.dim,
                        m.nrows()
                    )));
                }
                if m.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("noise factor must be finite"));
                }
            }
            _ => {}
        }
        self.noise = noise;
        Ok(self)
    }

    /// Adds the stabilizing term `−λ|u|u` to a continuous-time drift.
    pub fn with_cubic_damping(mut self, lambda: f64) -> Result<Self> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(invalid(
                "cubic damping must be a finite non-negative number",
            ));
        }
        if matches!(self.dynamics, Dynamics::LinearMap { .. }) {
            return Err(invalid(
                "cubic damping applies to continuous-time models only",
            ));
        }
        self.cubic_damping = lambda;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn noise(&self) -> &NoiseFactor {
        &self.noise
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.dynamics, Dynamics::LinearMap { .. })
    }

    /// Continuous-time drift `ψ(u)` (for the linear map, `A u`).
    pub fn drift(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        self.drift_into(u.as_slice(), out.as_mut_slice());
        out
    }

    fn drift_into(&self, u: &[f64], out: &mut [f64]) {
        match &self.dynamics {
            Dynamics::Lorenz63 { sigma, r, b } => {
                let v = lorenz63_drift([u[0], u[1], u[2]], *sigma, *r, *b);
                out.copy_from_slice(&v);
            }
            Dynamics::Lorenz96 { forcing } => lorenz96_drift_into(u, *forcing, out),
            Dynamics::TruncatedNs(ns) => ns.drift_into(u, out),
            Dynamics::LinearMap { a } => {
                let v = a * DVector::from_column_slice(u);
                out.copy_from_slice(v.as_slice());
            }
        }
        if self.cubic_damping > 0.0 {
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (o, x) in out.iter_mut().zip(u) {
                *o -= self.cubic_damping * norm * x;
            }
        }
    }

    fn check_state(&self, state: &DVector<f64>) -> Result<()> {
        if state.len() != self.dim {
            return Err(invalid(format!(
                "state has dimension {}, model expects {}",
                state.len(),
                self.dim
            )));
        }
        if state.iter().any(|x| !x.is_finite()) {
            return Err(invalid("state has non-finite entries"));
        }
        Ok(())
    }

    /// Standard normals per noise increment (columns of `Σ`).
    fn noise_columns(&self, state: &DVector<f64>) -> usize {
        match &self.noise {
            NoiseFactor::None => 0,
            NoiseFactor::Isotropic(_) => self.dim,
            NoiseFactor::Constant(m) => m.ncols(),
            NoiseFactor::StateDependent(g) => g(state).ncols(),
        }
    }

    /// Number of standard normals one forecast from `state` consumes.
    pub fn noise_dim(&self, state: &DVector<f64>) -> usize {
        let per_step = self.noise_columns(state);
        if self.is_discrete() {
            per_step
        } else {
            per_step * self.substeps
        }
    }

    /// One realization of `Ψ_h(state) + ζ`, deterministic given the noise
    /// source.
    pub fn forecast<R: Rng + ?Sized>(
        &self,
        state: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        self.check_state(state)?;
        let normals: Vec<f64> = (0..self.noise_dim(state))
            .map(|_| rng.sample(StandardNormal))
            .collect();
        self.forecast_with_normals(state, &normals)
    }

    /// Forecast driven by explicit standard-normal increments, consumed
    /// substep by substep. Negating `normals` gives the antithetic path.
    pub fn forecast_with_normals(
        &self,
        state: &DVector<f64>,
        normals: &[f64],
    ) -> Result<DVector<f64>> {
        self.check_state(state)?;
        let m = self.noise_columns(state);
        if normals.len() != self.noise_dim(state) {
            return Err(invalid(format!(
                "expected {} normals, got {}",
                self.noise_dim(state),
                normals.len()
            )));
        }
        if let Dynamics::LinearMap { a } = &self.dynamics {
            let mut next = a * state;
            if let Some(factor) = self.noise.factor_at(self.dim, state) {
                next += factor * DVector::from_column_slice(normals);
            }
            return check_finite(next, state);
        }

        let dt = self.step / self.substeps as f64;
        let sqrt_dt = dt.sqrt();
        let mut u = state.clone();
        let mut f = vec![0.0; self.dim];
        for step in 0..self.substeps {
            let xi = &normals[step * m..(step + 1) * m];
            self.drift_into(u.as_slice(), &mut f);
            let prev = u.clone();
            for (x, fx) in u.iter_mut().zip(&f) {
                *x += fx * dt;
            }
            match &self.noise {
                NoiseFactor::None => {}
                NoiseFactor::Isotropic(s) => {
                    let scale = s * sqrt_dt;
                    for (x, z) in u.iter_mut().zip(xi) {
                        *x += scale * z;
                    }
                }
                NoiseFactor::Constant(mat) => {
                    u += mat * DVector::from_column_slice(xi) * sqrt_dt;
                }
                NoiseFactor::StateDependent(g) => {
                    let mat = g(&prev);
                    if mat.ncols() != m || mat.nrows() != self.dim {
                        return Err(invalid("state-dependent noise factor changed shape"));
                    }
                    u += mat * DVector::from_column_slice(xi) * sqrt_dt;
                }
            }
            if u.iter()
                .any(|x| !x.is_finite() || x.abs() > BLOWUP_THRESHOLD)
            {
                return Err(Error::NumericalBlowup {
                    member: None,
                    last_finite_state: prev.as_slice().to_vec(),
                });
            }
        }
        Ok(u)
    }

    /// Generator of a quadratic energy along the SDE:
    /// `Lℰ(u) = ∇ℰ(u)·ψ(u) + tr(Σᵀ W Σ)`.
    pub fn energy_generator(&self, energy: &EnergyFunctional, u: &DVector<f64>) -> Result<f64> {
        let grad = energy.gradient(u)?;
        let drift = self.drift(u);
        let s = self.noise.covariance_rate(self.dim, u);
        let diffusion = (energy.weight() * s).trace();
        Ok(grad.dot(&drift) + diffusion)
    }

    /// Named energy functionals available for this model.
    pub fn energy_catalog(&self) -> Vec<(&'static str, EnergyFunctional)> {
        let mut out = vec![("kinetic", EnergyFunctional::kinetic(self.dim))];
        if let Dynamics::Lorenz63 { sigma, r, .. } = self.dynamics {
            out.push(("lorenz63", EnergyFunctional::lorenz63(sigma, r)));
            out.push(("lorenz63_partial", EnergyFunctional::lorenz63_partial(r)));
        }
        out
    }
}

fn check_finite(next: DVector<f64>, prev: &DVector<f64>) -> Result<DVector<f64>> {
    if next
        .iter()
        .any(|x| !x.is_finite() || x.abs() > BLOWUP_THRESHOLD)
    {
        Err(Error::NumericalBlowup {
            member: None,
            last_finite_state: prev.as_slice().to_vec(),
        })
    } else {
        Ok(next)
    }
}

/// Symmetric PSD square root via the eigendecomposition.
pub fn psd_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig_desc(c)?;
    let scale = eig.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if eig.values.iter().any(|&x| x < -1e-12 * (1.0 + scale)) {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.values.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    Ok(eig.map_values(|x| x.max(0.0).sqrt()))
}

pub fn lorenz63_drift(u: [f64; 3], sigma: f64, r: f64, b: f64) -> [f64; 3] {
    let [x, y, z] = u;
    [sigma * (y - x), x * (r - z) - y, x * y - b * z]
}

fn lorenz96_drift_into(u: &[f64], forcing: f64, out: &mut [f64]) {
    let n = u.len();
    for i in 0..n {
        let im2 = u[(i + n - 2) % n];
        let im1 = u[(i + n - 1) % n];
        let ip1 = u[(i + 1) % n];
        out[i] = (ip1 - im2) * im1 - u[i] + forcing;
    }
}

pub fn lorenz96_drift(u: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    if u.len() < 4 {
        return Err(invalid(format!("Lorenz 96 needs N >= 4, got {}", u.len())));
    }
    let mut out = DVector::zeros(u.len());
    lorenz96_drift_into(u.as_slice(), forcing, out.as_mut_slice());
    Ok(out)
}

/// Galerkin truncation of 2-D vorticity dynamics on the torus.
///
/// Modes live on the half lattice `I = {k : 0 < |k| ≤ N, arg k ∈ [0, π)}`;
/// the conjugate modes `v_{-k} = v_k*` are implied. Quadratic products are
/// truncated back to `I ∪ (−I)`, which keeps `⟨v, B(Kv, v)⟩ = 0` exact.
#[derive(Debug, Clone)]
pub struct NsGalerkin {
    modes: Vec<(i32, i32)>,
    viscosity: f64,
    radius: i32,
    lookup: Vec<Option<usize>>,
}

fn in_upper_half(k: (i32, i32)) -> bool {
    k.1 > 0 || (k.1 == 0 && k.0 > 0)
}

impl NsGalerkin {
    pub fn new(n: i32, viscosity: f64) -> Result<Self> {
        if n < 1 {
            return Err(invalid("truncation radius must be at least 1"));
        }
        let mut modes = Vec::new();
        for k2 in 0..=n {
            for k1 in -n..=n {
                if k1 * k1 + k2 * k2 <= n * n && in_upper_half((k1, k2)) {
                    modes.push((k1, k2));
                }
            }
        }
        Self::from_modes(modes, viscosity)
    }

    pub fn from_modes(modes: Vec<(i32, i32)>, viscosity: f64) -> Result<Self> {
        if !(viscosity >= 0.0) {
            return Err(invalid("viscosity must be non-negative"));
        }
        if modes.is_empty() {
            return Err(invalid("mode set is empty"));
        }
        let mut radius = 0;
        for &k in &modes {
            if k == (0, 0) {
                return Err(invalid("mode k = 0 is not allowed"));
            }
            if !in_upper_half(k) {
                return Err(invalid(format!(
                    "mode {k:?} is not in the upper half lattice"
                )));
            }
            radius = radius.max(k.0.abs()).max(k.1.abs());
        }
        let side = (4 * radius + 1) as usize;
        let mut lookup = vec![None; side * side];
        let mut ns = Self {
            modes,
            viscosity,
            radius,
            lookup: Vec::new(),
        };
        for (i, &k) in ns.modes.iter().enumerate() {
            let slot = ns.slot(k).expect("inside grid");
            if lookup[slot].is_some() {
                return Err(invalid(format!("duplicate mode {k:?}")));
            }
            lookup[slot] = Some(i);
        }
        ns.lookup = lookup;
        Ok(ns)
    }

    fn slot(&self, k: (i32, i32)) -> Option<usize> {
        let off = 2 * self.radius;
        let (a, b) = (k.0 + off, k.1 + off);
        let side = 4 * self.radius + 1;
        if a < 0 || b < 0 || a >= side || b >= side {
            None
        } else {
            Some((a * side + b) as usize)
        }
    }

    pub fn modes(&self) -> &[(i32, i32)] {
        &self.modes
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    /// Real state dimension (Re/Im pairs).
    pub fn state_dim(&self) -> usize {
        2 * self.modes.len()
    }

    pub fn unpack(&self, state: &[f64]) -> Vec<Complex<f64>> {
        state.chunks(2).map(|c| Complex::new(c[0], c[1])).collect()
    }

    pub fn pack(&self, coeffs: &[Complex<f64>]) -> DVector<f64> {
        DVector::from_iterator(2 * coeffs.len(), coeffs.iter().flat_map(|c| [c.re, c.im]))
    }

    /// Coefficient of `e_k` for any `k ∈ I ∪ (−I)`.
    fn coeff(&self, v: &[Complex<f64>], k: (i32, i32)) -> Option<Complex<f64>> {
        if let Some(i) = self.slot(k).and_then(|s| self.lookup[s]) {
            return Some(v[i]);
        }
        self.slot((-k.0, -k.1))
            .and_then(|s| self.lookup[s])
            .map(|i| v[i].conj())
    }

    /// `P_k B(Kṽ, ṽ)` for each retained mode, with `B(u, w) = (u·∇)w` and
    /// `K e_p = e_p i p^⊥ / |p|²`.
    pub fn advection(&self, v: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let full: Vec<((i32, i32), Complex<f64>)> = self
            .modes
            .iter()
            .zip(v)
            .flat_map(|(&k, &c)| [(k, c), ((-k.0, -k.1), c.conj())])
            .collect();
        self.modes
            .iter()
            .map(|&k| {
                let mut acc = Complex::new(0.0, 0.0);
                for &(p, vp) in &full {
                    let q = (k.0 - p.0, k.1 - p.1);
                    if let Some(vq) = self.coeff(v, q) {
                        let cross = f64::from(p.0 * q.1 - p.1 * q.0);
                        let p2 = f64::from(p.0 * p.0 + p.1 * p.1);
                        acc -= vp * vq * (cross / p2);
                    }
                }
                acc
            })
            .collect()
    }

    /// `⟨ṽ, B(Kṽ, ṽ)⟩` summed over `I ∪ (−I)`.
    pub fn advection_energy(&self, v: &[Complex<f64>]) -> f64 {
        let b = self.advection(v);
        2.0 * v
            .iter()
            .zip(&b)
            .map(|(vk, bk)| (vk.conj() * bk).re)
            .sum::<f64>()
    }

    fn drift_into(&self, u: &[f64], out: &mut [f64]) {
        let v = self.unpack(u);
        let b = self.advection(&v);
        for (i, &k) in self.modes.iter().enumerate() {
            let k2 = f64::from(k.0 * k.0 + k.1 * k.1);
            let d = -self.viscosity * k2 * v[i] - b[i];
            out[2 * i] = d.re;
            out[2 * i + 1] = d.im;
        }
    }

    pub fn drift(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        if state.len() != self.state_dim() {
            return Err(invalid("state dimension does not match the mode set"));
        }
        let mut out = DVector::zeros(state.len());
        self.drift_into(state.as_slice(), out.as_mut_slice());
        Ok(out)
    }
}

/// Shifted quadratic energy `ℰ(u) = (u − c)ᵀ W (u − c)` with `W` PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyFunctional {
    weight: DMatrix<f64>,
    shift: DVector<f64>,
}

impl EnergyFunctional {
    pub fn new(weight: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        if !weight.is_square() || weight.nrows() != shift.len() {
            return Err(invalid("weight must be d x d and shift of length d"));
        }
        if (&weight - weight.transpose()).norm() > 1e-12 * (1.0 + weight.norm()) {
            return Err(invalid("weight must be symmetric"));
        }
        psd_sqrt(&weight)?;
        Ok(Self { weight, shift })
    }

    pub fn kinetic(d: usize) -> Self {
        Self {
            weight: DMatrix::identity(d, d),
            shift: DVector::zeros(d),
        }
    }

    /// `|H u|²`.
    pub fn observable(h: &DMatrix<f64>) -> Self {
        let d = h.ncols();
        Self {
            weight: h.transpose() * h,
            shift: DVector::zeros(d),
        }
    }

    /// `r x² + σ y² + σ (z − 2r)²`.
    pub fn lorenz63(sigma: f64, r: f64) -> Self {
        Self {
            weight: DMatrix::from_diagonal(&DVector::from_vec(vec![r, sigma, sigma])),
            shift: DVector::from_vec(vec![0.0, 0.0, 2.0 * r]),
        }
    }

    /// `y² + (z − r)²`.
    pub fn lorenz63_partial(r: f64) -> Self {
        Self {
            weight: DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0])),
            shift: DVector::from_vec(vec![0.0, 0.0, r]),
        }
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn eval(&self, u: &DVector<f64>) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(invalid(format!(
                "energy expects dimension {}, got {}",
                self.dim(),
                u.len()
            )));
        }
        let c = u - &self.shift;
        Ok(c.dot(&(&self.weight * &c)).max(0.0))
    }

    pub fn gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.dim() {
            return Err(invalid("dimension mismatch"));
        }
        Ok(&self.weight * (u - &self.shift) * 2.0)
    }
}

pub fn eval_energy(f: &EnergyFunctional, u: &DVector<f64>) -> Result<f64> {
    f.eval(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Role, StreamKey};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lorenz63_drift_values() {
        assert_eq!(lorenz63_drift([0.0; 3], 10.0, 28.0, 8.0 / 3.0), [0.0; 3]);
        let f = lorenz63_drift([1.0; 3], 10.0, 28.0, 8.0 / 3.0);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[1], 26.0);
        assert_relative_eq!(f[2], 1.0 - 8.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lorenz96_drift_matches_loop_oracle() {
        let forcing = 0.0;
        let u = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let f = lorenz96_drift(&u, forcing).unwrap();
        assert_eq!(f.as_slice(), &[-1.0, 0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 9;
        let u = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let f = lorenz96_drift(&u, 8.0).unwrap();
        for i in 0..n {
            let at = |j: i64| u[(j.rem_euclid(n as i64)) as usize];
            let i = i as i64;
            let expect = -at(i - 2) * at(i - 1) + at(i - 1) * at(i + 1) - at(i) + 8.0;
            assert_relative_eq!(f[i as usize], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn lorenz96_zero_state_and_small_n() {
        let f = lorenz96_drift(&DVector::zeros(6), 8.0).unwrap();
        assert!(f.iter().all(|&x| x == 8.0));
        assert!(lorenz96_drift(&DVector::zeros(3), 8.0).is_err());
        assert!(ModelSpec::lorenz96(3, 8.0, 0.05, 10).is_err());
    }

    #[test]
    fn lorenz96_equilibrium_is_fixed() {
        let m = ModelSpec::lorenz96(40, 8.0, 0.05, 50).unwrap();
        let u = DVector::from_element(40, 8.0);
        let mut rng = StreamKey::new(1).rng(0, 0, Role::Signal);
        assert_eq!(m.forecast(&u, &mut rng).unwrap(), u);
    }

    #[test]
    fn linear_map_is_exact() {
        let a = DMatrix::identity(2, 2) * 0.5;
        let m = ModelSpec::linear_contraction(a, 0.5, &DMatrix::zeros(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m
            .forecast(&DVector::from_vec(vec![2.0, 2.0]), &mut rng)
            .unwrap();
        assert_eq!(out.as_slice(), &[1.0, 1.0]);
        let out = m
            .forecast(&DVector::from_vec(vec![4.0, -2.0]), &mut rng)
            .unwrap();
        assert_eq!(out.as_slice(), &[2.0, -1.0]);
    }

    #[test]
    fn linear_contraction_validation() {
        let zero = DMatrix::zeros(2, 2);
        assert!(ModelSpec::linear_contraction(DMatrix::identity(2, 2), 0.1, &zero).is_err());
        assert!(ModelSpec::linear_contraction(DMatrix::identity(2, 2) * 0.95, 0.1, &zero).is_err());
        assert!(ModelSpec::linear_contraction(DMatrix::identity(2, 2) * 0.9, 0.1, &zero).is_ok());
    }

    #[test]
    fn forecast_rejects_bad_state() {
        let m = ModelSpec::lorenz63(10.0, 28.0, 8.0 / 3.0, 0.01, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.forecast(&DVector::zeros(2), &mut rng).is_err());
        let bad = DVector::from_vec(vec![f64::NAN, 0.0, 0.0]);
        assert!(matches!(
            m.forecast(&bad, &mut rng),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn blowup_is_reported_with_last_state() {
        // Two huge Euler steps: the xz coupling pushes |y| past 1e15.
        let m = ModelSpec::lorenz63(10.0, 28.0, 8.0 / 3.0, 1.0, 2).unwrap();
        let start = DVector::from_vec(vec![1e6, 1e6, 1e6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match m.forecast(&start, &mut rng) {
            Err(Error::NumericalBlowup {
                last_finite_state, ..
            }) => {
                assert!(last_finite_state.iter().all(|x| x.is_finite()));
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn lorenz63_fine_step_self_oracle() {
        let coarse = ModelSpec::lorenz63(10.0, 28.0, 8.0 / 3.0, 0.01, 100).unwrap();
        let fine = ModelSpec::lorenz63(10.0, 28.0, 8.0 / 3.0, 0.01, 10_000).unwrap();
        let u = DVector::from_vec(vec![1.5, -2.0, 20.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = coarse.forecast(&u, &mut rng).unwrap();
        let b = fine.forecast(&u, &mut rng).unwrap();
        assert!((&a - &b).norm() / b.norm() < 1e-4);
    }

    #[test]
    fn forecast_is_deterministic_per_seed() {
        let m = ModelSpec::lorenz96(40, 8.0, 0.05, 10)
            .unwrap()
            .with_noise(NoiseFactor::Isotropic(0.5))
            .unwrap();
        let u = DVector::from_fn(40, |i, _| (i as f64).sin());
        let key = StreamKey::new(99);
        let a = m.forecast(&u, &mut key.rng(3, 4, Role::Forecast)).unwrap();
        let b = m.forecast(&u, &mut key.rng(3, 4, Role::Forecast)).unwrap();
        assert_eq!(a, b);
        let c = m.forecast(&u, &mut key.rng(3, 5, Role::Forecast)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn energy_evaluation() {
        let f = EnergyFunctional::kinetic(2);
        assert_eq!(f.eval(&DVector::from_vec(vec![3.0, 4.0])).unwrap(), 25.0);
        assert!(f.eval(&DVector::zeros(3)).is_err());
        let l63 = EnergyFunctional::lorenz63(10.0, 28.0);
        let direct = 28.0 * 1.0 + 10.0 * 1.0 + 10.0 * (1.0f64 - 56.0).powi(2);
        assert_eq!(direct, 30288.0);
        assert_eq!(
            l63.eval(&DVector::from_vec(vec![1.0, 1.0, 1.0])).unwrap(),
            direct
        );
    }

    #[test]
    fn energy_rejects_indefinite_weight() {
        let w = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(EnergyFunctional::new(w, DVector::zeros(2)).is_err());
    }

    #[test]
    fn ns_index_set_and_validation() {
        let ns = NsGalerkin::new(2, 1.0).unwrap();
        assert!(ns.modes().iter().all(|&k| in_upper_half(k)));
        // Half of the nonzero lattice points in the disc of radius 2.
        assert_eq!(ns.modes().len(), 6);
        assert!(NsGalerkin::from_modes(vec![(0, 0), (1, 0)], 1.0).is_err());
        assert!(NsGalerkin::from_modes(vec![(-1, 0)], 1.0).is_err());
        assert!(NsGalerkin::from_modes(vec![(1, 0), (1, 0)], 1.0).is_err());
    }

    #[test]
    fn ns_single_mode_has_no_advection() {
        let ns = NsGalerkin::new(3, 0.7).unwrap();
        let idx = ns.modes().iter().position(|&k| k == (1, 0)).unwrap();
        let mut v = vec![Complex::new(0.0, 0.0); ns.modes().len()];
        v[idx] = Complex::new(0.3, -1.2);
        let state = ns.pack(&v);
        let drift = ns.drift(&state).unwrap();
        let expect = ns.pack(&[v[idx] * -0.7]);
        assert_relative_eq!(drift[2 * idx], expect[0], epsilon = 1e-15);
        assert_relative_eq!(drift[2 * idx + 1], expect[1], epsilon = 1e-15);
        assert!(ns.advection(&v).iter().all(|c| c.norm() == 0.0));
    }
}
