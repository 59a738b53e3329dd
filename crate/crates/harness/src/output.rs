//! Result files.
//!
//! Trial CSVs share the columns
//! `step,signal_energy,ensemble_energy,observable_energy,diverged`, and
//! memory-loss files append `distance`:
//!
//! - `signal_energy`: `|Uₙ|²`
//! - `ensemble_energy`: `Σₖ |V⁽ᵏ⁾ₙ|²`
//! - `observable_energy`: `Σₖ |HV⁽ᵏ⁾ₙ|² + K·M·|HUₙ|²` in whitened coordinates
//! - `diverged`: `1` on the row of the cycle that blew up, else `0`
//! - `distance`: `|V̄^μ − V̄^ν| + ‖C^μ − C^ν‖_F`
//!
//! Boundedness files hold cycles `1..=N`; memory-loss files also hold the
//! initial gap at step 0. Numbers use Rust's shortest round-trip format, so
//! identical runs give identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use enkf_core::diagnostics::{MemoryLossRecord, TrialRecord, TrialStep};
use serde::Serialize;

use crate::HarnessError;

pub const TRIAL_HEADER: &str = "step,signal_energy,ensemble_energy,observable_energy,diverged";
pub const MEMORY_HEADER: &str =
    "step,signal_energy,ensemble_energy,observable_energy,diverged,distance";

fn push_row(out: &mut String, step: usize, s: &TrialStep, diverged: bool) {
    let _ = write!(
        out,
        "{step},{},{},{},{}",
        s.signal,
        s.ensemble,
        s.lyapunov,
        u8::from(diverged)
    );
}

const NAN_STEP: TrialStep = TrialStep {
    signal: f64::NAN,
    ensemble: f64::NAN,
    lyapunov: f64::NAN,
};

pub fn trial_csv(rec: &TrialRecord) -> String {
    let mut out = String::with_capacity(64 * (rec.steps.len() + 2));
    out.push_str(TRIAL_HEADER);
    out.push('\n');
    for (i, s) in rec.steps.iter().enumerate() {
        push_row(&mut out, i + 1, s, false);
        out.push('\n');
    }
    if rec.diverged {
        push_row(&mut out, rec.steps.len() + 1, &NAN_STEP, true);
        out.push('\n');
    }
    out
}

pub fn memory_csv(rec: &MemoryLossRecord) -> String {
    let mut out = String::with_capacity(80 * (rec.distances.len() + 2));
    out.push_str(MEMORY_HEADER);
    out.push('\n');
    for (i, (s, d)) in rec.energies.iter().zip(&rec.distances).enumerate() {
        push_row(&mut out, i, s, false);
        let _ = writeln!(out, ",{d}");
    }
    if rec.diverged {
        push_row(&mut out, rec.distances.len(), &NAN_STEP, true);
        out.push_str(",NaN\n");
    }
    out
}

/// Serializes file writes from concurrent trials.
#[derive(Debug)]
pub struct Collector {
    dir: PathBuf,
    lock: Mutex<Vec<PathBuf>>,
}

impl Collector {
    pub fn new(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            lock: Mutex::new(Vec::new()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf, HarnessError> {
        let path = self.dir.join(name);
        let mut written = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        std::fs::write(&path, contents).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path.clone());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, HarnessError> {
        let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
        text.push('\n');
        self.write(name, &text)
    }

    /// Paths written so far, sorted.
    pub fn written(&self) -> Vec<PathBuf> {
        let mut v = self.lock.lock().unwrap_or_else(|p| p.into_inner()).clone();
        v.sort();
        v
    }
}
