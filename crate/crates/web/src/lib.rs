//! Browser demo: a Lorenz 63 twin experiment, a coupled-replica memory-loss
//! curve and the rank-deficient adjustment-filter example.
//!
//! The plain functions are ordinary Rust and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert arguments and errors.

use enkf_core::diagnostics::{fit_decay, initial_condition, memory_loss_trial, TrialSetup};
use enkf_core::filters::{
    eakf_spread, eakf_spread_with_basis, filter_step, FilterKind, InflationScheme,
};
use enkf_core::models::{ModelSpec, NoiseFactor};
use enkf_core::numerics::{svd_desc, EPS_RANK};
use enkf_core::observations::ObservationOperator;
use enkf_core::rng::StreamKey;
use nalgebra::{DMatrix, DVector};
use wasm_bindgen::prelude::*;

const STEP: f64 = 0.05;
const SUBSTEPS: usize = 10;
const MAX_STEPS: usize = 5000;

fn lorenz63() -> enkf_core::Result<ModelSpec> {
    ModelSpec::lorenz63(10.0, 28.0, 8.0 / 3.0, STEP, SUBSTEPS)?
        .with_noise(NoiseFactor::Isotropic(1.0))
}

/// `H = I` when `observe_all`, otherwise only the x coordinate.
fn operator(observe_all: bool) -> enkf_core::Result<ObservationOperator> {
    let h = if observe_all {
        DMatrix::identity(3, 3)
    } else {
        DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])
    };
    ObservationOperator::new(h)
}

fn check_steps(steps: usize) -> Result<(), String> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must lie in 1..={MAX_STEPS}"));
    }
    Ok(())
}

/// Per-step traces of a twin experiment.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct TwinRun {
    signal_x: Vec<f64>,
    mean_x: Vec<f64>,
    error: Vec<f64>,
    diverged_at: Option<usize>,
}

#[wasm_bindgen]
impl TwinRun {
    /// x coordinate of the true signal.
    pub fn signal_x(&self) -> Vec<f64> {
        self.signal_x.clone()
    }

    /// x coordinate of the ensemble mean.
    pub fn mean_x(&self) -> Vec<f64> {
        self.mean_x.clone()
    }

    /// `|V̄ − U|` per step.
    pub fn error(&self) -> Vec<f64> {
        self.error.clone()
    }

    /// Step at which a member left the finite range, or -1.
    pub fn diverged_at(&self) -> i32 {
        self.diverged_at.map_or(-1, |n| n as i32)
    }
}

pub fn twin(
    filter: &str,
    steps: usize,
    members: usize,
    observe_all: bool,
    seed: u64,
) -> Result<TwinRun, String> {
    check_steps(steps)?;
    let kind: FilterKind = filter
        .parse()
        .map_err(|e: enkf_core::Error| e.to_string())?;
    let model = lorenz63().map_err(|e| e.to_string())?;
    let op = operator(observe_all).map_err(|e| e.to_string())?;
    let key = StreamKey::new(seed).with_scenario("web-twin");
    let mut signal = DVector::from_column_slice(&[1.0, 2.0, 25.0]);
    let mut ens = initial_condition(&signal, members, &DVector::zeros(3), 2.0, &key)
        .map_err(|e| e.to_string())?;
    let mut run = TwinRun {
        signal_x: Vec::with_capacity(steps),
        mean_x: Vec::with_capacity(steps),
        error: Vec::with_capacity(steps),
        diverged_at: None,
    };
    for n in 1..=steps {
        match filter_step(
            kind,
            &model,
            &op,
            &ens,
            &signal,
            &key,
            n as u64,
            InflationScheme::None,
        ) {
            Ok(out) => {
                let mean = out.ensemble.mean();
                run.signal_x.push(out.signal[0]);
                run.mean_x.push(mean[0]);
                run.error.push((mean - &out.signal).norm());
                ens = out.ensemble;
                signal = out.signal;
            }
            Err(enkf_core::Error::NumericalBlowup { .. }) => {
                run.diverged_at = Some(n);
                break;
            }
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(run)
}

/// Distances between two ETKF replicas started far apart, followed by the
/// fitted per-step decay factor (NaN when no fit is possible).
pub fn memory_curve(
    steps: usize,
    members: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<f64>, String> {
    check_steps(steps)?;
    let model = lorenz63().map_err(|e| e.to_string())?;
    let op = operator(true).map_err(|e| e.to_string())?;
    let key = StreamKey::new(seed).with_scenario("web-memory");
    let signal = DVector::from_column_slice(&[1.0, 2.0, 25.0]);
    let far = StreamKey {
        scenario: !key.scenario,
        ..key
    };
    let mu = initial_condition(&signal, members, &DVector::zeros(3), 1.0, &key)
        .map_err(|e| e.to_string())?;
    let nu = initial_condition(
        &signal,
        members,
        &DVector::from_element(3, separation),
        5.0,
        &far,
    )
    .map_err(|e| e.to_string())?;
    let setup = TrialSetup {
        kind: FilterKind::Etkf,
        model: &model,
        op: &op,
        scheme: InflationScheme::None,
        horizon: steps,
        lyapunov_m: 1.0,
        key,
    };
    let rec = memory_loss_trial(&setup, &signal, &mu, &nu).map_err(|e| e.to_string())?;
    let gamma = fit_decay(&rec.distances, 1e-10).map_or(f64::NAN, |f| f.gamma);
    let mut out = rec.distances;
    out.push(gamma);
    Ok(out)
}

/// `Ŝ = [[1, −1], [0, 0]]`, `H = 0`: the posterior must equal the prior.
pub fn rank_deficient_demo() -> Result<String, String> {
    let spread = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]);
    let h = DMatrix::zeros(2, 2);
    let prior = &spread * spread.transpose();
    let good = eakf_spread(&spread, &h).map_err(|e| e.to_string())?;
    let r = svd_desc(&spread, EPS_RANK)
        .map_err(|e| e.to_string())?
        .right;
    let bad = eakf_spread_with_basis(&spread, &h, &r.transpose()).map_err(|e| e.to_string())?;
    let show = |m: &DMatrix<f64>| {
        let rows: Vec<String> = m
            .row_iter()
            .map(|r| format!("[{:.4}, {:.4}]", r[0] + 0.0, r[1] + 0.0))
            .collect();
        format!("[{}]", rows.join(", "))
    };
    Ok(format!(
        "prior spread  {}\n\
         block basis   S = {}   |SS^T - S^S^^T| = {:.2e}\n\
         basis G = R^T S = {}   |SS^T - S^S^^T| = {:.2e}, |SS^T - 0.5 S^S^^T| = {:.2e}",
        show(&spread),
        show(&good),
        (&good * good.transpose() - &prior).norm(),
        show(&bad),
        (&bad * bad.transpose() - &prior).norm(),
        (&bad * bad.transpose() - &prior * 0.5).norm(),
    ))
}

#[wasm_bindgen]
pub fn twin_experiment(
    filter: &str,
    steps: u32,
    members: u32,
    observe_all: bool,
    seed: u32,
) -> Result<TwinRun, JsValue> {
    twin(
        filter,
        steps as usize,
        members as usize,
        observe_all,
        seed.into(),
    )
    .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn memory_loss_curve(
    steps: u32,
    members: u32,
    separation: f64,
    seed: u32,
) -> Result<Vec<f64>, JsValue> {
    memory_curve(steps as usize, members as usize, separation, seed.into())
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn eakf_demo() -> Result<String, JsValue> {
    rank_deficient_demo().map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twin_tracks_with_full_observations() {
        let run = twin("etkf", 200, 10, true, 1).unwrap();
        assert_eq!(run.error.len(), 200);
        assert_eq!(run.diverged_at(), -1);
        let late: f64 = run.error[100..].iter().sum::<f64>() / 100.0;
        // Observation noise has unit variance per coordinate.
        assert!(late < 3.0, "{late}");
        assert_eq!(run, twin("etkf", 200, 10, true, 1).unwrap());
    }

    #[test]
    fn twin_rejects_bad_input() {
        assert!(twin("kalman", 10, 10, true, 1).is_err());
        assert!(twin("enkf", 0, 10, true, 1).is_err());
        assert!(twin("enkf", 10, 1, true, 1).is_err());
    }

    #[test]
    fn memory_curve_decays() {
        let out = memory_curve(200, 10, 20.0, 3).unwrap();
        assert_eq!(out.len(), 202);
        let gamma = *out.last().unwrap();
        assert!(gamma < 1.0, "{gamma}");
        assert!(out[200] < 1e-3 * out[0]);
    }

    #[test]
    fn demo_text_shows_both_bases() {
        let text = rank_deficient_demo().unwrap();
        assert!(
            text.contains("[[1.0000, -1.0000], [0.0000, 0.0000]]"),
            "{text}"
        );
        assert!(
            text.contains("[[0.7071, -0.7071], [0.0000, 0.0000]]"),
            "{text}"
        );
    }
}
