//! Stand-alone numerical audits: covariance identity, perturbation
//! formulas, the rank-deficient adjustment-filter example and the EAKF
//! Jacobian at the `M₀` point.

use enkf_core::diagnostics::{covariance_identity_audit, enkf_averaged_audit};
use enkf_core::filters::{eakf_spread, eakf_spread_with_basis, FilterKind};
use enkf_core::numerics::{svd_desc, sym_eig_desc, EPS_RANK};
use enkf_core::perturbation::{
    convergence, eakf_jacobian_audit, eigenprojection_derivative, eigenvector_derivative,
    finite_difference as fd, transformation_derivative, JacobianAudit,
};
use enkf_core::rng::{Role, StreamKey};
use nalgebra::DMatrix;
use rand::Rng;

use crate::HarnessError;

pub const COVARIANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub lines: Vec<String>,
    pub passed: bool,
}

pub fn covariance_audit(
    kind: FilterKind,
    count: usize,
    draws: usize,
    seed: u64,
) -> Result<AuditOutcome, HarnessError> {
    let key = StreamKey::new(seed).with_scenario("covariance-audit");
    if kind == FilterKind::Enkf {
        let a = enkf_averaged_audit(draws, &key)?;
        return Ok(AuditOutcome {
            lines: vec![format!(
                "enkf averaged residual {:e} over {} draws, 3-sigma bound {:e}: {}",
                a.residual_norm,
                a.draws,
                a.bound,
                if a.passed { "PASS" } else { "FAIL" }
            )],
            passed: a.passed,
        });
    }
    let a = covariance_identity_audit(kind, count, &key)?;
    let passed = a.max_residual < COVARIANCE_TOL;
    Ok(AuditOutcome {
        lines: vec![format!(
            "{} max residual {:e} over {} instances (worst #{}): {}",
            kind.name(),
            a.max_residual,
            a.count,
            a.worst_index,
            if passed { "PASS" } else { "FAIL" }
        )],
        passed,
    })
}

fn random_sym<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a + a.transpose()) * 0.5
}

/// Symmetric matrix whose eigenvalues are at least 0.05 apart.
fn simple_spectrum<R: Rng>(rng: &mut R, n: usize) -> Result<DMatrix<f64>, HarnessError> {
    loop {
        let c = random_sym(rng, n);
        let v = sym_eig_desc(&c)?.values;
        if v.as_slice().windows(2).all(|w| w[0] - w[1] > 0.05) {
            return Ok(c);
        }
    }
}

pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSummary {
    pub instances: usize,
    /// Largest error at the smallest step.
    pub worst_error: f64,
    pub min_slope: f64,
    pub max_slope: f64,
    /// Distance of the worked `diag(1, 2)` case from `[[0, −1], [−1, 0]]`.
    pub worked_case_error: f64,
}

impl PerturbationSummary {
    pub fn passed(&self) -> bool {
        self.worst_error < FD_TOL
            && (self.min_slope - 2.0).abs() <= 0.5
            && (self.max_slope - 2.0).abs() <= 0.5
            && self.worked_case_error < 1e-12
    }
}

/// Eigenprojection, eigenvector and transformation derivatives against
/// central differences on `count` random simple-spectrum matrices.
pub fn perturbation_summary(count: usize, seed: u64) -> Result<PerturbationSummary, HarnessError> {
    let key = StreamKey::new(seed).with_scenario("perturbation-audit");
    let mut worst = 0.0f64;
    let mut min_slope = f64::INFINITY;
    let mut max_slope = f64::NEG_INFINITY;
    for t in 0..count {
        let mut rng = key.rng(t as u64, 0, Role::Instance);
        let n = 2 + t % 4;
        let c = simple_spectrum(&mut rng, n)?;
        let dc = random_sym(&mut rng, n);
        let idx = t % n;
        let dp = eigenprojection_derivative(&c, &dc, idx)?;
        let a = convergence(dp.as_slice(), &FD_STEPS, |e| {
            Ok(fd::eigenprojection(&c, &dc, idx, e)?.as_slice().to_vec())
        })?;
        let dv = eigenvector_derivative(&c, &dc, idx)?;
        let b = convergence(dv.as_slice(), &FD_STEPS, |e| {
            Ok(fd::eigenvector(&c, &dc, idx, e)?.as_slice().to_vec())
        })?;
        let du = transformation_derivative(&c, &dc)?;
        let u = convergence(du.as_slice(), &FD_STEPS, |e| {
            Ok(fd::transformation(&c, &dc, e)?.as_slice().to_vec())
        })?;
        for check in [a, b, u] {
            worst = worst.max(check.errors[FD_STEPS.len() - 1]);
            min_slope = min_slope.min(check.slope);
            max_slope = max_slope.max(check.slope);
        }
    }
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let dc = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let worked = eigenprojection_derivative(&c, &dc, 1)?;
    let expect = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
    Ok(PerturbationSummary {
        instances: count,
        worst_error: worst,
        min_slope,
        max_slope,
        worked_case_error: (worked - expect).norm(),
    })
}

pub fn perturbation_audit(count: usize, seed: u64) -> Result<AuditOutcome, HarnessError> {
    let s = perturbation_summary(count, seed)?;
    let passed = s.passed();
    Ok(AuditOutcome {
        lines: vec![
            format!(
                "{} instances: worst error at eps=1e-6 {:e}, slopes in [{:.3}, {:.3}]",
                s.instances, s.worst_error, s.min_slope, s.max_slope
            ),
            format!("diag(1,2) worked case error {:e}", s.worked_case_error),
            (if passed { "PASS" } else { "FAIL" }).to_string(),
        ],
        passed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankDeficientDemo {
    pub spread: DMatrix<f64>,
    pub correct: DMatrix<f64>,
    pub wrong: DMatrix<f64>,
    /// `‖SSᵀ − ŜŜᵀ‖_F` for the block-structured basis.
    pub correct_residual: f64,
    /// `‖SSᵀ − ½ŜŜᵀ‖_F` for the basis `G = Rᵀ`.
    pub wrong_half_residual: f64,
    /// `‖SSᵀ − ŜŜᵀ‖_F` for the basis `G = Rᵀ`.
    pub wrong_violation: f64,
}

/// `Ŝ = [[1, −1], [0, 0]]`, `H = 0`: the posterior must equal the prior,
/// which only the block-structured eigenbasis achieves.
pub fn rank_deficient_demo() -> Result<RankDeficientDemo, HarnessError> {
    let spread = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
    let h = DMatrix::zeros(2, 2);
    let correct = eakf_spread(&spread, &h)?;
    let r = svd_desc(&spread, EPS_RANK)?.right;
    let wrong = eakf_spread_with_basis(&spread, &h, &r.transpose())?;
    let prior = &spread * spread.transpose();
    let outer = |s: &DMatrix<f64>| s * s.transpose();
    Ok(RankDeficientDemo {
        correct_residual: (outer(&correct) - &prior).norm(),
        wrong_half_residual: (outer(&wrong) - &prior * 0.5).norm(),
        wrong_violation: (outer(&wrong) - &prior).norm(),
        spread,
        correct,
        wrong,
    })
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| {
            let cells: Vec<String> = r
                .iter()
                .map(|x| format!("{:.6}", if *x == 0.0 { 0.0 } else { *x }))
                .collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

pub fn rank_deficient_demo_lines(demo: &RankDeficientDemo) -> Vec<String> {
    vec![
        format!("prior spread S^ = {}, H = 0", fmt_matrix(&demo.spread)),
        format!("block basis G = I:  S = {}", fmt_matrix(&demo.correct)),
        format!("  |SS^T - S^S^^T| = {:e}", demo.correct_residual),
        format!("basis G = R^T:      S = {}", fmt_matrix(&demo.wrong)),
        format!(
            "  |SS^T - S^S^^T| = {:e}  (covariance relation violated)",
            demo.wrong_violation
        ),
        format!("  |SS^T - 0.5 S^S^^T| = {:e}", demo.wrong_half_residual),
    ]
}

pub fn jacobian_audit(
    d: usize,
    k: usize,
    q: usize,
    shift: f64,
    floor: f64,
) -> Result<JacobianAudit, HarnessError> {
    Ok(eakf_jacobian_audit(d, k, q, shift, floor)?)
}

pub fn jacobian_lines(a: &JacobianAudit) -> Vec<String> {
    vec![format!(
        "d={} K={} q={}: smallest singular value {:e}, largest {:e}, floor {:e}: {}",
        a.d,
        a.k,
        a.q,
        a.smallest_singular_value,
        a.largest_singular_value,
        a.floor,
        if a.passed { "PASS" } else { "FAIL" }
    )]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_matches_hand_values() {
        let demo = rank_deficient_demo().unwrap();
        assert!(demo.correct_residual < 1e-12);
        assert!(demo.wrong_half_residual < 1e-12);
        assert!((demo.wrong_violation - 1.0).abs() < 1e-12);
        let a = 1.0 / 2f64.sqrt();
        assert!((demo.wrong[(0, 0)].abs() - a).abs() < 1e-12);
    }

    #[test]
    fn matrix_text() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -0.0, 0.5, 2.0]);
        assert_eq!(
            fmt_matrix(&m),
            "[[1.000000, 0.000000], [0.500000, 2.000000]]"
        );
    }
}
