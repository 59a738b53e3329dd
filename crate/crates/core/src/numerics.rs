//! Dense symmetric eigendecomposition and SVD with fixed ordering and sign
//! conventions, plus the spectral matrix functions the filters rely on.
//!
//! Both factorizations are cyclic Jacobi iterations (two-sided for the
//! eigenproblem, one-sided for the SVD). nalgebra's bidiagonal SVD loses
//! accuracy on some rank-deficient inputs, and the ensemble spreads here are
//! rank deficient by construction. Spectra come out in descending order,
//! singular bases are completed to square orthogonal matrices and vector
//! signs are pinned so that identical input always produces identical output.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Reconstruction and orthogonality tolerance (relative to the matrix norm).
pub const EPS_REC: f64 = 1e-10;
/// Default relative cutoff below which a singular value counts as zero.
pub const EPS_RANK: f64 = 1e-12;

/// `A = Gᵀ diag(D) G` with the eigenvectors stored as the rows of `basis`
/// and `values` non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    pub basis: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Row `i` of the basis as a column vector.
    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.basis.row(i).transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_values(|x| x)
    }

    /// `Gᵀ diag(f(D)) G`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, j| {
            f(self.values[i]) * self.basis[(i, j)]
        });
        self.basis.transpose() * scaled
    }
}

/// `S = Q Λ R` with `Q` (d×d) and `R` (K×K) orthogonal and `Λ` the d×K
/// diagonal-rectangular matrix of non-increasing singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub left: DMatrix<f64>,
    /// The `min(d, K)` diagonal entries of Λ.
    pub values: DVector<f64>,
    pub right: DMatrix<f64>,
    pub rank: usize,
}

impl Svd {
    pub fn sigma(&self) -> DMatrix<f64> {
        let (d, k) = (self.left.nrows(), self.right.nrows());
        DMatrix::from_fn(d, k, |i, j| if i == j { self.values[i] } else { 0.0 })
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.left * self.sigma() * &self.right
    }

    /// Columns of `Q` spanning the range (`Q₁`).
    pub fn left_range(&self) -> DMatrix<f64> {
        self.left.columns(0, self.rank).into_owned()
    }

    /// Rows of `R` spanning the row space (`R₁`).
    pub fn right_range(&self) -> DMatrix<f64> {
        self.right.rows(0, self.rank).into_owned()
    }

    /// Nonzero block `Λ₁` as a vector.
    pub fn range_values(&self) -> DVector<f64> {
        self.values.rows(0, self.rank).into_owned()
    }
}

fn ensure_finite(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{what} has non-finite entries")))
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Sort key used for descending spectra: stable, NaN-free by precondition.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite spectrum"));
    idx
}

/// Symmetric eigendecomposition with descending eigenvalues.
///
/// Each eigenvector is signed so that its largest-magnitude entry (first one
/// on exact ties) is positive. That choice stays fixed under small
/// perturbations of a diagonally dominant basis, which keeps the adjustment
/// filter's eigenbasis continuous.
pub fn sym_eig_desc(a: &DMatrix<f64>) -> Result<SymEig> {
    if !a.is_square() {
        return Err(invalid(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    ensure_finite(a, "matrix")?;
    let p = a.nrows();
    if p == 0 {
        return Ok(SymEig {
            basis: DMatrix::zeros(0, 0),
            values: DVector::zeros(0),
        });
    }
    let eig = jacobi_eigen(symmetrize(a));
    let order = descending_order(eig.eigenvalues.as_slice());
    let mut basis = DMatrix::zeros(p, p);
    let mut values = DVector::zeros(p);
    for (row, &src) in order.iter().enumerate() {
        values[row] = eig.eigenvalues[src];
        let v = eig.eigenvectors.column(src);
        let pivot = v
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
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..p {
            basis[(row, j)] = sign * v[j];
        }
    }
    Ok(SymEig { basis, values })
}

/// Index of the first entry with magnitude above `tol`, if any.
fn first_significant(v: impl Iterator<Item = f64>, tol: f64) -> Option<f64> {
    v.into_iter().find(|x| x.abs() > tol)
}

/// Extend nearly orthonormal columns `q` (n×m) to an n×n orthogonal matrix.
/// The given columns are re-orthogonalized in order, then Gram–Schmidt runs
/// against the standard basis in index order.
fn complete_orthonormal(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    for c in q.column_iter() {
        let mut v = c.into_owned();
        for _ in 0..2 {
            for u in &cols {
                let proj = u.dot(&v);
                v.axpy(-proj, u, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            cols.push(v / norm);
        }
    }
    let mut e = 0;
    while cols.len() < n && e < n {
        let mut v = DVector::zeros(n);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v.axpy(-proj, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            v /= norm;
            if first_significant(v.iter().copied(), EPS_RANK).unwrap_or(1.0) < 0.0 {
                v = -v;
            }
            cols.push(v);
        }
        e += 1;
    }
    DMatrix::from_columns(&cols)
}

/// Full SVD `S = Q Λ R` with descending singular values.
///
/// `rank` counts singular values above `rank_tol · σ_max`. For each singular
/// triple the first entry of the `R` row with magnitude above [`EPS_RANK`]
/// is made positive (flipping the matching `Q` column).
pub fn svd_desc(s: &DMatrix<f64>, rank_tol: f64) -> Result<Svd> {
    let t = thin_svd(s, rank_tol)?;
    Ok(Svd {
        left: complete_orthonormal(&t.q),
        values: t.values,
        right: complete_orthonormal(&t.r_t).transpose(),
        rank: t.rank,
    })
}

/// Range part of [`svd_desc`]: `(Q₁, Λ₁, R₁)` with the same ordering and
/// signs, without completing either basis.
pub fn svd_range(
    s: &DMatrix<f64>,
    rank_tol: f64,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let t = thin_svd(s, rank_tol)?;
    let r = t.rank.min(t.q.ncols()).min(t.r_t.ncols());
    Ok((
        t.q.columns(0, r).into_owned(),
        t.values.rows(0, r).into_owned(),
        t.r_t.columns(0, r).transpose(),
    ))
}

/// Singular values and the full right factor `R` of [`svd_desc`].
pub fn svd_right(s: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let t = thin_svd(s, 0.0)?;
    Ok((t.values, complete_orthonormal(&t.r_t).transpose()))
}

struct ThinSvd {
    q: DMatrix<f64>,
    values: DVector<f64>,
    /// Kept rows of `R`, as columns.
    r_t: DMatrix<f64>,
    rank: usize,
}

fn thin_svd(s: &DMatrix<f64>, rank_tol: f64) -> Result<ThinSvd> {
    ensure_finite(s, "matrix")?;
    if !(rank_tol >= 0.0) {
        return Err(invalid("rank tolerance must be non-negative"));
    }
    let (d, k) = s.shape();
    let m = d.min(k);
    if m == 0 {
        return Ok(ThinSvd {
            q: DMatrix::zeros(d, 0),
            values: DVector::zeros(0),
            r_t: DMatrix::zeros(k, 0),
            rank: 0,
        });
    }
    let transposed = k > d;
    let work = if transposed { s.transpose() } else { s.clone() };
    let (sig, w, v) = one_sided_jacobi(work);
    let order = descending_order(&sig);
    let top = order.first().map_or(0.0, |&i| sig[i]);
    let significant = |x: f64| x > 0.0 && x > 1e-13 * top;

    // `work = w diag(sig) vᵀ`; columns of `w` are normalized (zero when the
    // singular value vanishes) and `v` is square orthogonal.
    let mut values = DVector::zeros(m);
    let mut q_cols: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut r_rows: Vec<DVector<f64>> = Vec::with_capacity(m);
    for (i, &src) in order.iter().enumerate() {
        values[i] = sig[src];
        let (qc, rc) = if transposed {
            (v.column(src).into_owned(), w.column(src).into_owned())
        } else {
            (w.column(src).into_owned(), v.column(src).into_owned())
        };
        let keep_q = transposed || significant(sig[src]);
        let keep_r = !transposed || significant(sig[src]);
        let sign = if keep_q && keep_r {
            match first_significant(rc.iter().copied(), EPS_RANK) {
                Some(x) if x < 0.0 => -1.0,
                _ => 1.0,
            }
        } else {
            1.0
        };
        if keep_q {
            q_cols.push(qc * sign);
        }
        if keep_r {
            r_rows.push(rc * sign);
        }
    }
    let q_thin = if q_cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&q_cols)
    };
    let r_thin_t = if r_rows.is_empty() {
        DMatrix::zeros(k, 0)
    } else {
        DMatrix::from_columns(&r_rows)
    };

    let sigma_max = values[0];
    let rank = if sigma_max > 0.0 {
        values.iter().filter(|&&x| x > rank_tol * sigma_max).count()
    } else {
        0
    };
    Ok(ThinSvd {
        q: q_thin,
        values,
        r_t: r_thin_t,
        rank,
    })
}

/// Tolerance on negative eigenvalues when accepting a matrix as PSD.
pub fn psd_tolerance(c: &DMatrix<f64>) -> f64 {
    1e-12 * (1.0 + spectral_norm_sym(c))
}

fn spectral_norm_sym(c: &DMatrix<f64>) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    jacobi_eigen(symmetrize(c))
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
}

struct JacobiEigen {
    eigenvalues: DVector<f64>,
    /// Eigenvectors as columns.
    eigenvectors: DMatrix<f64>,
}

const JACOBI_SWEEPS: usize = 100;

/// Cyclic two-sided Jacobi on a symmetric matrix.
///
/// nalgebra's QR iteration supplies a starting basis when it is orthogonal
/// to working precision; Jacobi sweeps then polish it.
fn jacobi_eigen(a: DMatrix<f64>) -> JacobiEigen {
    let n = a.nrows();
    let start = SymmetricEigen::new(a.clone()).eigenvectors;
    let (mut a, mut v) = if (start.transpose() * &start - DMatrix::identity(n, n)).norm() < 1e-12 {
        (symmetrize(&(start.transpose() * &a * &start)), start)
    } else {
        (a, DMatrix::identity(n, n))
    };
    let scale = a.norm();
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= 0.5 * f64::EPSILON * (app * aqq).abs().sqrt()
                    || apq.abs() <= 1e-300 * scale
                    || apq == 0.0
                {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (x, y) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * x - s * y;
                    a[(k, q)] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * x - s * y;
                    a[(q, k)] = s * x + c * y;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let (x, y) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * x - s * y;
                    v[(k, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    JacobiEigen {
        eigenvalues: a.diagonal(),
        eigenvectors: v,
    }
}

/// One-sided (Hestenes) Jacobi: `a = w diag(sig) vᵀ` with `v` orthogonal
/// and the columns of `w` unit length, or zero where `sig` vanishes.
///
/// Eigenvectors of `aᵀa` give a starting rotation, so the sweeps mostly
/// polish.
fn one_sided_jacobi(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (rows, n) = a.shape();
    let start = SymmetricEigen::new(a.transpose() * &a).eigenvectors;
    let (mut a, mut v) = if (start.transpose() * &start - DMatrix::identity(n, n)).norm() < 1e-12 {
        (&a * &start, start)
    } else {
        (a, DMatrix::identity(n, n))
    };
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let rotate = |x: &mut [f64], y: &mut [f64], c: f64, s: f64| {
        for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
            let (a, b) = (*xi, *yi);
            *xi = c * a - s * b;
            *yi = s * a + c * b;
        }
    };
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (head, tail) = a.as_mut_slice().split_at_mut(q * rows);
                let cp = &mut head[p * rows..(p + 1) * rows];
                let cq = &mut tail[..rows];
                let alpha = dot(cp, cp);
                let beta = dot(cq, cq);
                let gamma = dot(cp, cq);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                let (vh, vt) = v.as_mut_slice().split_at_mut(q * n);
                rotate(&mut vh[p * n..(p + 1) * n], &mut vt[..n], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let sig: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    for (j, &sj) in sig.iter().enumerate() {
        if sj > 0.0 {
            a.column_mut(j).scale_mut(1.0 / sj);
        }
    }
    (sig, a, v)
}

/// `(I + C)^{-1/2}` for symmetric PSD `C`, the unique symmetric PD root.
pub fn inv_sqrt_shifted(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eig_desc(c)?;
    let min = eig.values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + eig.values.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    if eig.dim() > 0 && min < -tol {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    Ok(eig.map_values(|x| 1.0 / (1.0 + x.max(0.0)).sqrt()))
}

/// `A ⪯ B`: the smallest eigenvalue of `B − A` is at least `−tol`.
pub fn psd_order(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(invalid(format!(
            "psd_order needs equal square shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(min_eigenvalue(&(b - a))? >= -tol)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    let eig = sym_eig_desc(a)?;
    Ok(eig.values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Largest singular value.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let (sig, _, _) = one_sided_jacobi(if a.nrows() < a.ncols() {
        a.transpose()
    } else {
        a.clone()
    });
    sig.into_iter().fold(0.0f64, f64::max)
}

/// Solve `A X = B` for symmetric positive definite `A` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(symmetrize(a)).ok_or_else(|| Error::NotPsd {
        min_eigenvalue: min_eigenvalue(a).unwrap_or(f64::NAN),
    })?;
    Ok(chol.solve(b))
}
