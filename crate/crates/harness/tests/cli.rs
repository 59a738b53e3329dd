use std::path::Path;
use std::process::{Command, Output};

use enkf_lab::output::{MEMORY_HEADER, TRIAL_HEADER};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_enkf-lab"));
    c.env_remove(enkf_lab::OUT_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_L63: &str = r#"
[scenario]
name = "small"
seed = 42
replicates = 3
horizon = 60

[model]
kind = "lorenz63"
step = 0.05
noise = 1.0

[filter]
kind = "etkf"
ensemble_size = 6
"#;

#[test]
fn missing_config_is_usage_error() {
    let o = run(&["run-filter", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.cfg"));
}

#[test]
fn unknown_subcommand_and_bad_flags() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&["covariance-audit", "--count", "x"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["covariance-audit", "--filter", "kalman"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad",
        &SMALL_L63.replace("ensemble_size = 6", "ensemble_size = 1"),
    );
    let o = run(&["run-filter", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write_config(dir.path(), "typo", &SMALL_L63.replace("horizon", "horizn"));
    assert_eq!(
        run(&["run-filter", "--config", &cfg]).status.code(),
        Some(2)
    );
}

#[test]
fn rank_deficient_demo_prints_both_bases() {
    let o = run(&["appendix-c-demo"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.contains("[[1.000000, -1.000000], [0.000000, 0.000000]]"),
        "{text}"
    );
    assert!(
        text.contains("[[0.707107, -0.707107], [0.000000, 0.000000]]"),
        "{text}"
    );
    assert!(text.contains("violated"));
}

#[test]
fn covariance_audit_cli() {
    let o = run(&["covariance-audit", "--count", "1000", "--filter", "eakf"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let line = stdout(&o);
    assert!(line.starts_with("eakf max residual"), "{line}");
    let o = run(&["covariance-audit", "--count", "200", "--filter", "etkf"]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&["covariance-audit", "--filter", "enkf", "--draws", "2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("enkf averaged residual"));
}

#[test]
fn jacobian_audit_cli() {
    let o = run(&["eakf-jacobian-audit", "--d", "2", "--k", "3", "--q", "2"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("PASS"));
    let o = run(&["eakf-jacobian-audit", "--d", "3", "--k", "2", "--q", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    // Away from M0 the audit is informational only.
    let o = run(&[
        "eakf-jacobian-audit",
        "--d",
        "2",
        "--k",
        "3",
        "--q",
        "2",
        "--shift",
        "10",
    ]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    assert_eq!(
        run(&["eakf-jacobian-audit", "--d", "2", "--k", "3", "--q", "3"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn perturbation_audit_cli() {
    let o = run(&["perturbation-audit", "--count", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn emit_plot_data_needs_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["emit-plot-data", "--results", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("nope");
    let o = run(&["emit-plot-data", "--results", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_trial_passes_through() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "one",
        &SMALL_L63.replace("replicates = 3", "replicates = 1"),
    );
    let out = dir.path().join("res");
    let o = run(&[
        "run-filter",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let trial = std::fs::read_to_string(out.join("small/trial_r000.csv")).unwrap();
    let plots = dir.path().join("plots");
    let o = run(&[
        "emit-plot-data",
        "--results",
        out.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let table = std::fs::read_to_string(plots.join("small_trial.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 60);
    for (t, q) in trial.lines().skip(1).zip(rows) {
        let energy = t.split(',').nth(3).unwrap();
        let f: Vec<&str> = q.split(',').collect();
        assert_eq!(f[1], "1");
        assert!(f[2..7].iter().all(|x| *x == energy));
    }
}

#[test]
fn trial_files_have_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cols", SMALL_L63);
    let out = dir.path().join("res");
    run(&[
        "run-filter",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(out.join("small/trial_r002.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(TRIAL_HEADER));
    assert_eq!(text.lines().count(), 61);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("small/run_filter.json")).unwrap())
            .unwrap();
    assert_eq!(json["trials"].as_array().unwrap().len(), 3);
}

#[test]
fn output_root_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let from_cfg = dir.path().join("cfg_out");
    let body = SMALL_L63.replace(
        "horizon = 60",
        &format!("horizon = 5\noutput = {:?}", from_cfg.to_str().unwrap()),
    );
    let cfg = write_config(dir.path(), "p", &body);
    run(&["run-filter", "--config", &cfg]);
    assert!(from_cfg.join("small/trial_r000.csv").exists());

    let env_out = dir.path().join("env_out");
    let o = bin()
        .args(["run-filter", "--config", &cfg])
        .env(enkf_lab::OUT_ENV, &env_out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env_out.join("small/trial_r000.csv").exists());

    let cli_out = dir.path().join("cli_out");
    bin()
        .args([
            "run-filter",
            "--config",
            &cfg,
            "--out",
            cli_out.to_str().unwrap(),
        ])
        .env(enkf_lab::OUT_ENV, &env_out)
        .output()
        .unwrap();
    assert!(cli_out.join("small/trial_r000.csv").exists());
}

#[test]
fn serial_and_parallel_runs_match_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rep", SMALL_L63);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&[
        "run-filter",
        "--config",
        &cfg,
        "--out",
        a.to_str().unwrap(),
        "--jobs",
        "1",
    ]);
    run(&[
        "run-filter",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--jobs",
        "3",
    ]);
    for f in [
        "trial_r000.csv",
        "trial_r001.csv",
        "trial_r002.csv",
        "run_filter.json",
    ] {
        let x = std::fs::read(a.join("small").join(f)).unwrap();
        let y = std::fs::read(b.join("small").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let c = dir.path().join("c");
    run(&[
        "run-filter",
        "--config",
        &cfg,
        "--out",
        c.to_str().unwrap(),
        "--seed",
        "43",
    ]);
    assert_ne!(
        std::fs::read(a.join("small/trial_r000.csv")).unwrap(),
        std::fs::read(c.join("small/trial_r000.csv")).unwrap()
    );
}

#[test]
fn memory_loss_plot_reports_median_and_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[scenario]
name = "pairs"
seed = 5
horizon = 120
task = "memory-loss"

[model]
kind = "lorenz63"
step = 0.05
noise = 1.0

[filter]
kind = "etkf"
ensemble_size = 10

[memory]
pairs = 20
"#;
    let cfg = write_config(dir.path(), "pairs", body);
    let out = dir.path().join("res");
    let o = run(&[
        "memory-loss",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        matches!(o.status.code(), Some(0) | Some(1)),
        "{}",
        stdout(&o)
    );
    let plots = dir.path().join("plots");
    let o = run(&[
        "emit-plot-data",
        "--results",
        out.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));

    let mut per_pair: Vec<Vec<f64>> = Vec::new();
    for p in 0..20 {
        let text = std::fs::read_to_string(out.join(format!("pairs/pair_r{p:03}.csv"))).unwrap();
        assert_eq!(text.lines().next(), Some(MEMORY_HEADER));
        per_pair.push(
            text.lines()
                .skip(1)
                .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
                .collect(),
        );
    }
    let table = std::fs::read_to_string(plots.join("pairs_pair.csv")).unwrap();
    let mut lines = table.lines().skip(1);
    let mut medians = Vec::new();
    for step in 0..=120 {
        let f: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(f[0], step.to_string());
        assert_eq!(f[1], "20");
        let mut col: Vec<f64> = per_pair.iter().map(|v| v[step]).collect();
        col.sort_by(f64::total_cmp);
        let median = 0.5 * (col[9] + col[10]);
        let got: f64 = f[9].parse().unwrap();
        assert!(
            (got - median).abs() <= 1e-12 * median.abs().max(1e-300),
            "{got} vs {median}"
        );
        medians.push(median);
    }
    let gamma_row = lines.next().unwrap();
    assert!(gamma_row.starts_with("#gamma_hat,"), "{gamma_row}");
    let gamma: f64 = gamma_row.split(',').nth(1).unwrap().parse().unwrap();
    let fit = enkf_core::diagnostics::fit_decay(&medians, 1e-10).unwrap();
    assert_eq!(gamma, fit.gamma);
    assert!(gamma < 1.0);
}
