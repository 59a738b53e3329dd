//! Scenario files.
//!
//! A scenario is a TOML document with the sections `[scenario]`, `[model]`,
//! `[observation]`, `[filter]` and optionally `[init]`, `[criterion]` and
//! `[memory]`. Matrices are written inline as row-major nested arrays
//! (`[[1.0, 0.0], [0.0, 1.0]]`). See `scenarios/` for complete examples.

use std::path::{Path, PathBuf};

use enkf_core::filters::{FilterKind, InflationScheme};
use enkf_core::models::{EnergyFunctional, ModelSpec, NoiseFactor, NsGalerkin};
use enkf_core::numerics::{operator_norm, sym_eig_desc};
use enkf_core::observations::ObservationOperator;
use enkf_core::rng::StreamKey;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::HarnessError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSection,
    pub model: ModelSection,
    #[serde(default)]
    pub observation: ObservationSection,
    pub filter: FilterSection,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub criterion: CriterionSection,
    #[serde(default)]
    pub memory: MemorySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    /// Master seed. Required: there is no clock-based default.
    pub seed: u64,
    #[serde(default = "one")]
    pub replicates: usize,
    pub horizon: usize,
    #[serde(default = "yes")]
    pub expect_bounded: bool,
    /// Root directory; files land in `<output>/<name>/`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// The subcommand this scenario is written for.
    #[serde(default)]
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    RunFilter,
    EstimateCriterion,
    Boundedness,
    MemoryLoss,
}

/// A scalar `s` (meaning `s·I`) or an explicit row-major matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize) -> Result<DMatrix<f64>, HarnessError> {
        match self {
            MatrixSpec::Scalar(s) => Ok(DMatrix::identity(n, n) * *s),
            MatrixSpec::Rows(rows) => rows_to_matrix(rows),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, HarnessError> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(HarnessError::config(
            "matrix rows must be non-empty and of equal length",
        ));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Lorenz63 {
        #[serde(default = "l63_sigma")]
        sigma: f64,
        #[serde(default = "l63_r")]
        r: f64,
        #[serde(default = "l63_b")]
        b: f64,
        step: f64,
        #[serde(default = "ten")]
        substeps: usize,
        #[serde(default)]
        noise: Option<MatrixSpec>,
        #[serde(default)]
        cubic_damping: f64,
    },
    Lorenz96 {
        #[serde(default = "forty")]
        n: usize,
        #[serde(default = "l96_forcing")]
        forcing: f64,
        step: f64,
        #[serde(default = "ten")]
        substeps: usize,
        #[serde(default)]
        noise: Option<MatrixSpec>,
        #[serde(default)]
        cubic_damping: f64,
    },
    TruncatedNs {
        /// Retain wavevectors with `max(|k₁|, |k₂|) <= modes`.
        modes: i32,
        viscosity: f64,
        /// One amplitude per retained mode, or a single value for all.
        #[serde(default)]
        forcing: Option<Forcing>,
        step: f64,
        #[serde(default = "ten")]
        substeps: usize,
        #[serde(default)]
        cubic_damping: f64,
    },
    Linear {
        dim: usize,
        a: MatrixSpec,
        /// Noise covariance `R`.
        noise: MatrixSpec,
        /// Contraction margin; defaults to `1 − ‖A‖`.
        #[serde(default)]
        beta: Option<f64>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Forcing {
    Uniform(f64),
    PerMode(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ObservationMatrix {
    /// `identity`, `first:q`, `every:s` or `diag:a,b,...`.
    Shorthand(String),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    #[serde(default = "identity_h")]
    pub h: ObservationMatrix,
    /// Observation noise covariance; the operator is whitened to `Γ^{-1/2}H`.
    #[serde(default = "unit_gamma")]
    pub gamma: MatrixSpec,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            h: identity_h(),
            gamma: unit_gamma(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub kind: String,
    pub ensemble_size: usize,
    /// `none`, `uniform:λ` or `additive:λ`.
    #[serde(default = "no_inflation")]
    pub inflation: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default)]
    pub signal: Option<Vec<f64>>,
    /// Signal steps discarded before assimilation starts.
    #[serde(default)]
    pub spinup: usize,
    /// Added to every coordinate of every member.
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "unit")]
    pub spread: f64,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            signal: None,
            spinup: 0,
            offset: 0.0,
            spread: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSection {
    /// `observable` (`|HU|²`) or a model catalog name such as `kinetic`,
    /// `lorenz63`, `lorenz63_partial`.
    #[serde(default = "observable")]
    pub energy: String,
    #[serde(default = "bulk")]
    pub bulk: usize,
    #[serde(default = "hundred")]
    pub spinup: usize,
    #[serde(default = "five")]
    pub spacing: usize,
    #[serde(default = "hundred")]
    pub shell: usize,
    #[serde(default = "shell_radius")]
    pub shell_radius: f64,
    #[serde(default = "draws")]
    pub draws: usize,
    /// Weight `M` of the signal term in the ensemble functional.
    #[serde(default)]
    pub lyapunov_m: Option<f64>,
    /// Batches for the batch-means standard error of the window average.
    #[serde(default = "twenty")]
    pub batches: usize,
    #[serde(default = "yes")]
    pub expect_admissible: bool,
}

impl Default for CriterionSection {
    fn default() -> Self {
        toml::from_str("").expect("all criterion fields have defaults")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemorySection {
    #[serde(default = "twenty")]
    pub pairs: usize,
    #[serde(default)]
    pub mu_offset: f64,
    #[serde(default = "unit")]
    pub mu_spread: f64,
    #[serde(default = "twenty_f")]
    pub nu_offset: f64,
    #[serde(default = "five_f")]
    pub nu_spread: f64,
    /// Fit window ends where `Dₙ` drops below `floor · D₀`.
    #[serde(default = "floor")]
    pub floor: f64,
    #[serde(default = "min_r_squared")]
    pub min_r_squared: f64,
    #[serde(default = "yes")]
    pub expect_decay: bool,
}

impl Default for MemorySection {
    fn default() -> Self {
        toml::from_str("").expect("all memory fields have defaults")
    }
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}
fn ten() -> usize {
    10
}
fn twenty() -> usize {
    20
}
fn forty() -> usize {
    40
}
fn hundred() -> usize {
    100
}
fn bulk() -> usize {
    150
}
fn draws() -> usize {
    200
}
fn yes() -> bool {
    true
}
fn unit() -> f64 {
    1.0
}
fn five_f() -> f64 {
    5.0
}
fn twenty_f() -> f64 {
    20.0
}
fn floor() -> f64 {
    1e-10
}
fn min_r_squared() -> f64 {
    0.8
}
fn shell_radius() -> f64 {
    50.0
}
fn l63_sigma() -> f64 {
    10.0
}
fn l63_r() -> f64 {
    28.0
}
fn l63_b() -> f64 {
    8.0 / 3.0
}
fn l96_forcing() -> f64 {
    8.0
}
fn identity_h() -> ObservationMatrix {
    ObservationMatrix::Shorthand("identity".into())
}
fn unit_gamma() -> MatrixSpec {
    MatrixSpec::Scalar(1.0)
}
fn no_inflation() -> String {
    "none".into()
}
fn observable() -> String {
    "observable".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))
    }
}

/// A scenario with every id resolved into concrete objects.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
    /// Whitened operator `Γ^{-1/2}H`.
    pub op: ObservationOperator,
    pub kind: FilterKind,
    pub scheme: InflationScheme,
    pub ensemble_size: usize,
    pub key: StreamKey,
    pub signal0: DVector<f64>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        let s = &config.scenario;
        if s.name.is_empty() || s.name.contains(['/', '\\']) {
            return Err(HarnessError::config(
                "scenario name must be a non-empty file name",
            ));
        }
        if s.horizon == 0 {
            return Err(HarnessError::config("horizon must be at least 1"));
        }
        if s.replicates == 0 {
            return Err(HarnessError::config("replicates must be at least 1"));
        }
        let model = build_model(&config.model)?;
        let op = build_observation(&config.observation, model.dim())?;
        let kind: FilterKind = config.filter.kind.parse()?;
        let scheme = parse_inflation(&config.filter.inflation)?;
        if config.filter.ensemble_size < 2 {
            return Err(HarnessError::config("ensemble_size must be at least 2"));
        }
        enkf_core::filters::inflate(&DMatrix::zeros(1, 1), scheme, kind)?;
        let signal0 = match &config.init.signal {
            Some(v) if v.len() != model.dim() => {
                return Err(HarnessError::config(format!(
                    "init.signal has {} entries, model dimension is {}",
                    v.len(),
                    model.dim()
                )))
            }
            Some(v) => DVector::from_column_slice(v),
            None => default_signal(&config.model, model.dim()),
        };
        let c = &config.criterion;
        if let Some(m) = c.lyapunov_m {
            if !(m > 0.0) || !m.is_finite() {
                return Err(HarnessError::config("lyapunov_m must be positive"));
            }
        }
        if config.memory.floor <= 0.0 || config.memory.floor >= 1.0 {
            return Err(HarnessError::config("memory.floor must lie in (0, 1)"));
        }
        let key = StreamKey::new(s.seed).with_scenario(&s.name);
        Ok(Self {
            ensemble_size: config.filter.ensemble_size,
            config,
            model,
            op,
            kind,
            scheme,
            key,
            signal0,
        })
    }

    pub fn name(&self) -> &str {
        &self.config.scenario.name
    }

    pub fn horizon(&self) -> usize {
        self.config.scenario.horizon
    }

    pub fn replicates(&self) -> usize {
        self.config.scenario.replicates
    }

    pub fn energy(&self) -> Result<EnergyFunctional, HarnessError> {
        let name = self.config.criterion.energy.as_str();
        if name == "observable" {
            return Ok(EnergyFunctional::observable(self.op.matrix()));
        }
        self.model
            .energy_catalog()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| HarnessError::config(format!("unknown energy '{name}' for this model")))
    }
}

fn noise_factor(spec: &Option<MatrixSpec>, d: usize) -> Result<NoiseFactor, HarnessError> {
    Ok(match spec {
        None => NoiseFactor::None,
        Some(MatrixSpec::Scalar(s)) if *s == 0.0 => NoiseFactor::None,
        Some(MatrixSpec::Scalar(s)) => NoiseFactor::Isotropic(*s),
        Some(MatrixSpec::Rows(rows)) => {
            let m = rows_to_matrix(rows)?;
            if m.nrows() != d {
                return Err(HarnessError::config(format!("noise factor needs {d} rows")));
            }
            NoiseFactor::Constant(m)
        }
    })
}

pub fn build_model(section: &ModelSection) -> Result<ModelSpec, HarnessError> {
    let spec = match section {
        ModelSection::Lorenz63 {
            sigma,
            r,
            b,
            step,
            substeps,
            noise,
            cubic_damping,
        } => ModelSpec::lorenz63(*sigma, *r, *b, *step, *substeps)?
            .with_noise(noise_factor(noise, 3)?)?
            .with_cubic_damping(*cubic_damping)?,
        ModelSection::Lorenz96 {
            n,
            forcing,
            step,
            substeps,
            noise,
            cubic_damping,
        } => ModelSpec::lorenz96(*n, *forcing, *step, *substeps)?
            .with_noise(noise_factor(noise, *n)?)?
            .with_cubic_damping(*cubic_damping)?,
        ModelSection::TruncatedNs {
            modes,
            viscosity,
            forcing,
            step,
            substeps,
            cubic_damping,
        } => {
            let ns = NsGalerkin::new(*modes, *viscosity)?;
            let count = ns.modes().len();
            let amps = match forcing {
                None => vec![0.0; count],
                Some(Forcing::Uniform(s)) => vec![*s; count],
                Some(Forcing::PerMode(v)) => v.clone(),
            };
            ModelSpec::truncated_ns(ns, &amps, *step, *substeps)?
                .with_cubic_damping(*cubic_damping)?
        }
        ModelSection::Linear {
            dim,
            a,
            noise,
            beta,
        } => {
            let a = a.to_matrix(*dim)?;
            let r = noise.to_matrix(*dim)?;
            let beta = beta.unwrap_or_else(|| 1.0 - operator_norm(&a));
            ModelSpec::linear_contraction(a, beta, &r)?
        }
    };
    Ok(spec)
}

fn default_signal(section: &ModelSection, d: usize) -> DVector<f64> {
    match section {
        ModelSection::Lorenz63 { .. } => DVector::from_column_slice(&[1.0, 2.0, 25.0]),
        ModelSection::Lorenz96 { forcing, .. } => {
            let mut u = DVector::from_element(d, *forcing);
            u[0] += 0.01;
            u
        }
        ModelSection::TruncatedNs { .. } => DVector::from_element(d, 0.1),
        ModelSection::Linear { .. } => DVector::from_element(d, 1.0),
    }
}

/// Parses the `h` shorthand or matrix for a state of dimension `d`.
pub fn observation_matrix(
    spec: &ObservationMatrix,
    d: usize,
) -> Result<DMatrix<f64>, HarnessError> {
    let op = match spec {
        ObservationMatrix::Rows(rows) => return rows_to_matrix(rows),
        ObservationMatrix::Shorthand(s) => {
            let (head, arg) = s
                .split_once(':')
                .map_or((s.as_str(), None), |(h, a)| (h, Some(a)));
            let count = |a: Option<&str>| -> Result<usize, HarnessError> {
                a.and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                    HarnessError::config(format!("'{s}' needs a positive integer argument"))
                })
            };
            match head.trim() {
                "identity" if arg.is_none() => ObservationOperator::identity(d)?,
                "first" => ObservationOperator::first_q(d, count(arg)?)?,
                "every" => ObservationOperator::every_nth(d, count(arg)?)?,
                "diag" => {
                    let vals = arg
                        .unwrap_or("")
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| HarnessError::config(format!("bad diagonal in '{s}'")))?;
                    if vals.len() != d {
                        return Err(HarnessError::config(format!("'{s}' needs {d} entries")));
                    }
                    ObservationOperator::from_diagonal(&vals)?
                }
                _ => {
                    return Err(HarnessError::config(format!(
                        "unknown observation shorthand '{s}'"
                    )))
                }
            }
        }
    };
    Ok(op.matrix().clone())
}

pub fn build_observation(
    section: &ObservationSection,
    d: usize,
) -> Result<ObservationOperator, HarnessError> {
    let h = observation_matrix(&section.h, d)?;
    if h.ncols() != d {
        return Err(HarnessError::config(format!(
            "H has {} columns, model dimension is {d}",
            h.ncols()
        )));
    }
    let q = h.nrows();
    let gamma = section.gamma.to_matrix(q)?;
    if gamma.shape() != (q, q) {
        return Err(HarnessError::config(format!("gamma must be {q}x{q}")));
    }
    if (&gamma - gamma.transpose()).norm() > 1e-12 * (1.0 + gamma.norm()) {
        return Err(HarnessError::config("gamma must be symmetric"));
    }
    let eig = sym_eig_desc(&gamma)?;
    let top = eig.values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(eig.values[q - 1] > 1e-12 * top) {
        return Err(enkf_core::Error::SingularObservationNoise.into());
    }
    let whiten = eig.map_values(|x| 1.0 / x.sqrt());
    Ok(ObservationOperator::new(whiten * h)?)
}

pub fn parse_inflation(s: &str) -> Result<InflationScheme, HarnessError> {
    let s = s.trim();
    if s == "none" {
        return Ok(InflationScheme::None);
    }
    let (kind, value) = s.split_once(':').ok_or_else(|| {
        HarnessError::config(format!(
            "inflation '{s}' is not none, uniform:λ or additive:λ"
        ))
    })?;
    let value: f64 = value
        .trim()
        .parse()
        .map_err(|_| HarnessError::config(format!("bad inflation value in '{s}'")))?;
    match kind.trim() {
        "uniform" => Ok(InflationScheme::Uniform(value)),
        "additive" => Ok(InflationScheme::Additive(value)),
        other => Err(HarnessError::config(format!(
            "unknown inflation kind '{other}'"
        ))),
    }
}
