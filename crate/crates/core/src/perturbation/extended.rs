//! Double-double Jacobi eigensolver used by the finite-difference checks.
//!
//! In plain f64 a central difference at ε = 1e-6 carries rounding noise of
//! order 1e-10, which swamps the ε² truncation term; evaluating the
//! perturbed spectra in ~32 significant digits pushes that floor far below
//! it so the second-order convergence is actually visible.

use nalgebra::{DMatrix, DVector};
use twofloat::TwoFloat;

type T = TwoFloat;

pub(crate) struct DdEig {
    /// Descending.
    pub values: Vec<T>,
    /// `vectors[j]` is the eigenvector for `values[j]`.
    pub vectors: Vec<Vec<T>>,
}

fn zero() -> T {
    T::from(0.0)
}

fn one() -> T {
    T::from(1.0)
}

/// `a / b` refined by two correction steps; the library's operator keeps
/// only about 17 digits.
fn div(a: T, b: T) -> T {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    T::new_add(q1, q2) + q3
}

/// Eigen-decomposition of `c + eps·dc`, with `eps·dc` formed in double-double.
pub(crate) fn eig_shifted(c: &DMatrix<f64>, dc: &DMatrix<f64>, eps: f64) -> DdEig {
    let n = c.nrows();
    let mut a: Vec<Vec<T>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| T::from(c[(i, j)]) + T::new_mul(eps, dc[(i, j)]))
                .collect()
        })
        .collect();
    // Symmetrize exactly.
    for i in 0..n {
        for j in 0..i {
            let m = (a[i][j] + a[j][i]) / 2.0;
            a[i][j] = m;
            a[j][i] = m;
        }
    }
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { one() } else { zero() })
                .collect()
        })
        .collect();

    let scale = a.iter().flatten().fold(zero(), |m, x| m + *x * *x).sqrt() + one();
    let tol = scale * 1e-31;
    for _sweep in 0..60 {
        let off = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .fold(zero(), |m, (i, j)| m + a[i][j] * a[i][j])
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p][q];
                if apq.hi() == 0.0 {
                    continue;
                }
                let theta = div(a[q][q] - a[p][p], apq * 2.0);
                let t = {
                    let mag = div(one(), theta.abs() + (theta * theta + one()).sqrt());
                    if theta < 0.0 {
                        -mag
                    } else {
                        mag
                    }
                };
                let cs = div(one(), (t * t + one()).sqrt());
                let sn = t * cs;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = cs * akp - sn * akq;
                    a[k][q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = cs * apk - sn * aqk;
                    a[q][k] = sn * apk + cs * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = cs * vp - sn * vq;
                    row[q] = sn * vp + cs * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].partial_cmp(&a[x][x]).expect("finite"));
    DdEig {
        values: order.iter().map(|&j| a[j][j]).collect(),
        vectors: order
            .iter()
            .map(|&j| (0..n).map(|i| v[i][j]).collect())
            .collect(),
    }
}

/// Eigenvector `j` of the shifted matrix, signed to agree with `reference`.
pub(crate) fn aligned_vector(eig: &DdEig, j: usize, reference: &DVector<f64>) -> Vec<T> {
    let v = &eig.vectors[j];
    let dot = v
        .iter()
        .zip(reference.iter())
        .fold(zero(), |m, (x, r)| m + *x * *r);
    if dot < 0.0 {
        v.iter().map(|x| -*x).collect()
    } else {
        v.clone()
    }
}

pub(crate) fn projector(eig: &DdEig, range: std::ops::Range<usize>) -> Vec<Vec<T>> {
    let n = eig.values.len();
    let mut p = vec![vec![zero(); n]; n];
    for j in range {
        let v = &eig.vectors[j];
        for r in 0..n {
            for c in 0..n {
                p[r][c] += v[r] * v[c];
            }
        }
    }
    p
}

/// `(plus − minus) / (2 eps)` rounded to f64.
pub(crate) fn central(plus: &[T], minus: &[T], eps: f64) -> Vec<f64> {
    plus.iter()
        .zip(minus)
        .map(|(a, b)| {
            let d = (*a - *b) / (2.0 * eps);
            d.hi() + d.lo()
        })
        .collect()
}
