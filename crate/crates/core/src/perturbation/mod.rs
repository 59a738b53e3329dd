//! Spectral perturbation of symmetric matrices: eigenprojections, their
//! directional derivatives, the derivative of the eigenvector transformation
//! map, the intermediate point `M₀`, and finite-difference audits.

mod extended;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::filters::{eakf_analysis, Ensemble, InflationScheme};
use crate::numerics::{svd_desc, sym_eig_desc, SymEig, EPS_RANK};
use crate::observations::ObservationOperator;

/// Eigenvalues closer than `1e-8·(1 + ρ(C))` are grouped together.
pub fn cluster_tolerance(eig: &SymEig) -> f64 {
    let rho = eig.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    1e-8 * (1.0 + rho)
}

/// A group of numerically equal eigenvalues; `range` indexes the rows of the
/// descending eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub value: f64,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenprojection {
    pub eigenvalue: f64,
    pub projector: DMatrix<f64>,
    pub multiplicity: usize,
}

fn check_symmetric(c: &DMatrix<f64>, what: &str) -> Result<()> {
    if !c.is_square() {
        return Err(invalid(format!("{what} must be square")));
    }
    if (c - c.transpose()).norm() > 1e-12 * (1.0 + c.norm()) {
        return Err(invalid(format!("{what} must be symmetric")));
    }
    Ok(())
}

fn check_direction(c: &DMatrix<f64>, dc: &DMatrix<f64>) -> Result<()> {
    check_symmetric(c, "C")?;
    check_symmetric(dc, "direction")?;
    if c.shape() != dc.shape() {
        return Err(invalid("C and direction differ in shape"));
    }
    Ok(())
}

/// Distinct eigenvalues of `eig` in descending order.
pub fn clusters(eig: &SymEig) -> Vec<Cluster> {
    let tol = cluster_tolerance(eig);
    let mut out: Vec<Cluster> = Vec::new();
    for (i, &x) in eig.values.iter().enumerate() {
        match out.last_mut() {
            Some(c) if eig.values[c.range.end - 1] - x <= tol => c.range.end = i + 1,
            _ => out.push(Cluster {
                value: x,
                range: i..i + 1,
            }),
        }
    }
    for c in &mut out {
        c.value = c.range.clone().map(|i| eig.values[i]).sum::<f64>() / c.range.len() as f64;
    }
    out
}

fn outer_sum(eig: &SymEig, range: Range<usize>) -> DMatrix<f64> {
    let b = eig.basis.rows(range.start, range.len());
    b.transpose() * b
}

/// `P_λ` for the `index`-th distinct eigenvalue (descending order).
pub fn eigenprojection(c: &DMatrix<f64>, index: usize) -> Result<Eigenprojection> {
    check_symmetric(c, "C")?;
    let eig = sym_eig_desc(c)?;
    let cl = clusters(&eig);
    let group = cl.get(index).ok_or_else(|| {
        invalid(format!(
            "eigenvalue index {index} out of range ({} distinct)",
            cl.len()
        ))
    })?;
    Ok(Eigenprojection {
        eigenvalue: group.value,
        projector: outer_sum(&eig, group.range.clone()),
        multiplicity: group.range.len(),
    })
}

/// `Σ_{η≠λ} (λ−η)⁻¹ P_η`.
fn reduced_resolvent(eig: &SymEig, cl: &[Cluster], index: usize) -> DMatrix<f64> {
    let n = eig.dim();
    let lam = cl[index].value;
    let mut s = DMatrix::zeros(n, n);
    for (j, other) in cl.iter().enumerate() {
        if j != index {
            s += outer_sum(eig, other.range.clone()) / (lam - other.value);
        }
    }
    s
}

fn projection_derivative_from(
    eig: &SymEig,
    cl: &[Cluster],
    dc: &DMatrix<f64>,
    index: usize,
) -> DMatrix<f64> {
    let p = outer_sum(eig, cl[index].range.clone());
    let s = reduced_resolvent(eig, cl, index);
    &p * dc * &s + &s * dc * &p
}

/// `D P_λ = P_λ dC S_λ + S_λ dC P_λ` for a simple eigenvalue.
pub fn eigenprojection_derivative(
    c: &DMatrix<f64>,
    dc: &DMatrix<f64>,
    index: usize,
) -> Result<DMatrix<f64>> {
    check_direction(c, dc)?;
    let eig = sym_eig_desc(c)?;
    let cl = clusters(&eig);
    let group = cl
        .get(index)
        .ok_or_else(|| invalid(format!("eigenvalue index {index} out of range")))?;
    if group.range.len() != 1 {
        return Err(Error::DegenerateEigenvalue { index });
    }
    Ok(projection_derivative_from(&eig, &cl, dc, index))
}

/// `D U = Σ_λ (D P_λ) P_λ`; requires a simple spectrum.
pub fn transformation_derivative(c: &DMatrix<f64>, dc: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_direction(c, dc)?;
    let eig = sym_eig_desc(c)?;
    let cl = clusters(&eig);
    if let Some(i) = cl.iter().position(|g| g.range.len() != 1) {
        return Err(Error::DegenerateEigenvalue { index: i });
    }
    let n = eig.dim();
    let mut u = DMatrix::zeros(n, n);
    for i in 0..cl.len() {
        u += projection_derivative_from(&eig, &cl, dc, i) * outer_sum(&eig, cl[i].range.clone());
    }
    Ok(u)
}

/// `Dψ_i = ψ_i dC Σ_{j≠i} (λ_i−λ_j)⁻¹ ψ_jᵀψ_j`, `i` indexing the descending
/// spectrum. Returned as a column vector.
pub fn eigenvector_derivative(
    c: &DMatrix<f64>,
    dc: &DMatrix<f64>,
    i: usize,
) -> Result<DVector<f64>> {
    check_direction(c, dc)?;
    let eig = sym_eig_desc(c)?;
    if i >= eig.dim() {
        return Err(invalid(format!("eigenvector index {i} out of range")));
    }
    let cl = clusters(&eig);
    let index = cl
        .iter()
        .position(|g| g.range.contains(&i))
        .expect("every index is clustered");
    if cl[index].range.len() != 1 {
        return Err(Error::DegenerateEigenvalue { index: i });
    }
    let s = reduced_resolvent(&eig, &cl, index);
    Ok((eig.basis.row(i) * dc * s).transpose())
}

/// Explicit Euler for `U' = Σ_λ Ṗ_λ(x) P_λ(x) U`, `U(0) = I`, along
/// `C(x) = C + x·dC` on `[0, 1]`.
pub fn transformation_ode(
    c: &DMatrix<f64>,
    dc: &DMatrix<f64>,
    steps: usize,
) -> Result<DMatrix<f64>> {
    check_direction(c, dc)?;
    if steps == 0 {
        return Err(invalid("steps must be positive"));
    }
    let n = c.nrows();
    let h = 1.0 / steps as f64;
    let mut u = DMatrix::identity(n, n);
    for s in 0..steps {
        let cx = c + dc * (s as f64 * h);
        let gen = transformation_derivative(&cx, dc)?;
        u += gen * &u * h;
    }
    Ok(u)
}

/// Intermediate point `M₀` (d×K): with `r = min(K−1, d)`, row `i < r` holds
/// `r−i` ones followed by `−(r−i)`; remaining entries are zero.
pub fn construct_m0(d: usize, k: usize) -> Result<DMatrix<f64>> {
    if d == 0 || k < 2 {
        return Err(invalid(format!(
            "construct_m0 needs d >= 1 and K >= 2, got d={d}, K={k}"
        )));
    }
    let r = (k - 1).min(d);
    Ok(DMatrix::from_fn(d, k, |i, j| {
        if i >= r {
            0.0
        } else if j < r - i {
            1.0
        } else if j == r - i {
            -((r - i) as f64)
        } else {
            0.0
        }
    }))
}

/// Finite-difference reference values computed in double-double precision.
pub mod finite_difference {
    use super::*;
    use extended::{aligned_vector, central, eig_shifted, projector};

    fn to_matrix(n: usize, v: Vec<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, &v)
    }

    fn flatten(p: Vec<Vec<twofloat::TwoFloat>>) -> Vec<twofloat::TwoFloat> {
        p.into_iter().flatten().collect()
    }

    /// Central difference of `P_λ` for the `index`-th distinct eigenvalue.
    pub fn eigenprojection(
        c: &DMatrix<f64>,
        dc: &DMatrix<f64>,
        index: usize,
        eps: f64,
    ) -> Result<DMatrix<f64>> {
        check_direction(c, dc)?;
        let cl = clusters(&sym_eig_desc(c)?);
        let range = cl
            .get(index)
            .ok_or_else(|| invalid("index out of range"))?
            .range
            .clone();
        let plus = flatten(projector(&eig_shifted(c, dc, eps), range.clone()));
        let minus = flatten(projector(&eig_shifted(c, dc, -eps), range));
        Ok(to_matrix(c.nrows(), central(&plus, &minus, eps)))
    }

    /// Central difference of the `i`-th eigenvector, sign-aligned with the
    /// unperturbed one.
    pub fn eigenvector(
        c: &DMatrix<f64>,
        dc: &DMatrix<f64>,
        i: usize,
        eps: f64,
    ) -> Result<DVector<f64>> {
        check_direction(c, dc)?;
        let reference = sym_eig_desc(c)?.vector(i);
        let plus = aligned_vector(&eig_shifted(c, dc, eps), i, &reference);
        let minus = aligned_vector(&eig_shifted(c, dc, -eps), i, &reference);
        Ok(DVector::from_vec(central(&plus, &minus, eps)))
    }

    /// `Σ_i (Dψ_i) ψ_iᵀ`, which equals the transformation derivative.
    pub fn transformation(c: &DMatrix<f64>, dc: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
        let eig = sym_eig_desc(c)?;
        let n = eig.dim();
        let mut u = DMatrix::zeros(n, n);
        for i in 0..n {
            u += eigenvector(c, dc, i, eps)? * eig.basis.row(i);
        }
        Ok(u)
    }
}

/// Error of the central difference against an analytic derivative at each
/// step size, and the fitted log-log slope.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCheck {
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
}

pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Compare `analytic` with `numeric(eps)` for every `eps` (max-abs error).
pub fn convergence<F>(analytic: &[f64], steps: &[f64], mut numeric: F) -> Result<ConvergenceCheck>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    let mut errors = Vec::with_capacity(steps.len());
    for &eps in steps {
        let v = numeric(eps)?;
        let err = v
            .iter()
            .zip(analytic)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        errors.push(err);
    }
    Ok(ConvergenceCheck {
        steps: steps.to_vec(),
        slope: log_log_slope(steps, &errors),
        errors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianAudit {
    pub d: usize,
    pub k: usize,
    pub q: usize,
    pub smallest_singular_value: f64,
    pub largest_singular_value: f64,
    pub floor: f64,
    pub passed: bool,
}

/// Observation matrix `diag(q, q−1, …, 1)` padded to q×d.
pub fn descending_diagonal_h(d: usize, q: usize) -> Result<DMatrix<f64>> {
    if q == 0 || q > d {
        return Err(invalid(format!("need 1 <= q <= d, got q={q}, d={d}")));
    }
    Ok(DMatrix::from_fn(q, d, |i, j| {
        if i == j {
            (q - i) as f64
        } else {
            0.0
        }
    }))
}

/// Central-difference Jacobian of `(U, V̂⁽¹⁾…V̂⁽ᴷ⁾) ↦ (U, V⁽¹⁾…V⁽ᴷ⁾)` for the
/// adjustment filter with `Z = 0`, evaluated at `U = 0`, `V̂ = M₀ + shift·W`
/// where `W` is a fixed deterministic pattern (`shift = 0` is the
/// intermediate point itself).
pub fn eakf_jacobian_audit(
    d: usize,
    k: usize,
    q: usize,
    shift: f64,
    floor: f64,
) -> Result<JacobianAudit> {
    let h = descending_diagonal_h(d, q)?;
    let op = ObservationOperator::new(h)?;
    let m0 = construct_m0(d, k)?;
    let pattern = DMatrix::from_fn(d, k, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4);
    let base = &m0 + pattern * shift;
    let z = DVector::zeros(q);
    let n_in = d * (k + 1);

    let map = |y: &DVector<f64>| -> Result<DVector<f64>> {
        let members = DMatrix::from_column_slice(d, k, &y.as_slice()[d..]);
        let post = eakf_analysis(&Ensemble::new(members)?, &z, &op, InflationScheme::None)?;
        let mut out = DVector::zeros(n_in);
        out.rows_mut(0, d).copy_from(&y.rows(0, d));
        out.rows_mut(d, d * k)
            .copy_from_slice(post.members().as_slice());
        Ok(out)
    };

    let mut y0 = DVector::zeros(n_in);
    y0.rows_mut(d, d * k).copy_from_slice(base.as_slice());
    let step = 1e-6;
    let mut jac = DMatrix::zeros(n_in, n_in);
    for col in 0..n_in {
        let mut yp = y0.clone();
        let mut ym = y0.clone();
        yp[col] += step;
        ym[col] -= step;
        let diff = (map(&yp)? - map(&ym)?) / (2.0 * step);
        if diff.iter().any(|x| !x.is_finite()) {
            return Err(Error::AuditFailed(format!(
                "non-finite difference in direction {col}"
            )));
        }
        jac.set_column(col, &diff);
    }
    let sv = svd_desc(&jac, EPS_RANK)?.values;
    let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let largest = sv.iter().copied().fold(0.0f64, f64::max);
    Ok(JacobianAudit {
        d,
        k,
        q,
        smallest_singular_value: smallest,
        largest_singular_value: largest,
        floor,
        passed: smallest > floor,
    })
}
