//! Aggregates trial CSVs into per-step quantile tables.
//!
//! Every directory below the results root is one scenario; CSV files in it
//! are grouped by the prefix before `_r` (`trial`, `pair`, …). Each group
//! becomes `<out>/<scenario>_<prefix>.csv` with columns
//! `step,count,energy_q05,energy_q25,energy_median,energy_q75,energy_q95`,
//! plus the same five `distance_*` columns for memory-loss groups. Those
//! also get a trailing `#gamma_hat,<γ̂>,r_squared,<R²>` row, fitted to the
//! median distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use enkf_core::diagnostics::fit_decay;

use crate::output::{MEMORY_HEADER, TRIAL_HEADER};
use crate::HarnessError;

const QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
/// Fit window for the annotation row, relative to the first median distance.
const PLOT_FLOOR: f64 = 1e-10;

/// One parsed trial file: per step, `(energy, distance)`.
type Series = BTreeMap<u64, (f64, Option<f64>)>;

fn parse_series(text: &str) -> Option<(Series, bool)> {
    let mut lines = text.lines();
    let header = lines.next()?.trim();
    let with_distance = match header {
        h if h == TRIAL_HEADER => false,
        h if h == MEMORY_HEADER => true,
        _ => return None,
    };
    let mut out = Series::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 {
            return None;
        }
        let step: u64 = f[0].parse().ok()?;
        let energy: f64 = f[3].parse().ok()?;
        let distance = if with_distance {
            Some(f.get(5)?.parse().ok()?)
        } else {
            None
        };
        out.insert(step, (energy, distance));
    }
    Some((out, with_distance))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn push_quantiles(out: &mut String, mut xs: Vec<f64>) {
    xs.retain(|x| x.is_finite());
    xs.sort_by(f64::total_cmp);
    for p in QUANTILES {
        if xs.is_empty() {
            out.push_str(",NaN");
        } else {
            let _ = write!(out, ",{}", quantile(&xs, p));
        }
    }
}

fn group_name(file: &Path) -> Option<String> {
    let stem = file.file_stem()?.to_str()?;
    Some(stem.rsplit_once("_r").map_or(stem, |(p, _)| p).to_string())
}

fn scenario_dirs(root: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut dirs = vec![root.to_path_buf()];
    let mut i = 0;
    while i < dirs.len() {
        let entries = std::fs::read_dir(&dirs[i]).map_err(|e| HarnessError::io(&dirs[i], e))?;
        for entry in entries {
            let path = entry.map_err(|e| HarnessError::io(&dirs[i], e))?.path();
            if path.is_dir() {
                dirs.push(path);
            }
        }
        i += 1;
    }
    dirs.sort();
    Ok(dirs)
}

/// Writes quantile tables for every trial group under `results`; returns
/// the files written. No usable CSV input is an error.
pub fn emit_plot_data(results: &Path, out: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if !results.is_dir() {
        return Err(HarnessError::Usage(format!(
            "{} is not a directory",
            results.display()
        )));
    }
    let mut tables: Vec<(String, String)> = Vec::new();
    for dir in scenario_dirs(results)? {
        if dir.starts_with(out) && out != results {
            continue;
        }
        let mut groups: BTreeMap<String, Vec<Series>> = BTreeMap::new();
        let mut memory: BTreeMap<String, bool> = BTreeMap::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| HarnessError::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for file in files {
            let text = std::fs::read_to_string(&file).map_err(|e| HarnessError::io(&file, e))?;
            let (Some((series, with_distance)), Some(group)) =
                (parse_series(&text), group_name(&file))
            else {
                continue;
            };
            memory.insert(group.clone(), with_distance);
            groups.entry(group).or_default().push(series);
        }
        let scenario = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("results")
            .to_string();
        for (group, series) in groups {
            let with_distance = memory[&group];
            tables.push((
                format!("{scenario}_{group}.csv"),
                table(&series, with_distance),
            ));
        }
    }
    if tables.is_empty() {
        return Err(HarnessError::Usage(format!(
            "no trial CSV files under {}",
            results.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut written = Vec::with_capacity(tables.len());
    for (name, text) in tables {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn table(series: &[Series], with_distance: bool) -> String {
    let steps: std::collections::BTreeSet<u64> =
        series.iter().flat_map(|s| s.keys().copied()).collect();
    let mut out =
        String::from("step,count,energy_q05,energy_q25,energy_median,energy_q75,energy_q95");
    if with_distance {
        out.push_str(",distance_q05,distance_q25,distance_median,distance_q75,distance_q95");
    }
    out.push('\n');
    let mut medians = Vec::new();
    for step in steps {
        let rows: Vec<(f64, Option<f64>)> = series
            .iter()
            .filter_map(|s| s.get(&step).copied())
            .collect();
        let _ = write!(out, "{step},{}", rows.len());
        push_quantiles(&mut out, rows.iter().map(|r| r.0).collect());
        if with_distance {
            let mut d: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.1)
                .filter(|x| x.is_finite())
                .collect();
            d.sort_by(f64::total_cmp);
            medians.push(if d.is_empty() {
                f64::NAN
            } else {
                quantile(&d, 0.5)
            });
            push_quantiles(&mut out, d);
        }
        out.push('\n');
    }
    if with_distance {
        match fit_decay(&medians, PLOT_FLOOR) {
            Some(f) => {
                let _ = writeln!(out, "#gamma_hat,{},r_squared,{}", f.gamma, f.r_squared);
            }
            None => out.push_str("#gamma_hat,NaN,r_squared,NaN\n"),
        }
    }
    out
}
