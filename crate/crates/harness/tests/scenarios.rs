//! Every bundled scenario loads and runs end to end at reduced size.

use std::path::PathBuf;

use enkf_lab::config::{Experiment, ExperimentConfig, Task};
use enkf_lab::experiments::{run_task, RunOptions};

fn scenario_files() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn bundled_scenarios_build() {
    let files = scenario_files();
    assert!(files.len() >= 10, "{files:?}");
    let mut names = std::collections::HashSet::new();
    for f in &files {
        let exp = Experiment::new(ExperimentConfig::load(f).unwrap()).unwrap();
        assert!(
            names.insert(exp.name().to_string()),
            "duplicate name in {}",
            f.display()
        );
        assert_eq!(
            f.file_stem().unwrap().to_str().unwrap(),
            exp.name(),
            "file name and scenario name differ"
        );
    }
}

#[test]
fn bundled_scenarios_run_small() {
    let out = tempfile::tempdir().unwrap();
    for f in scenario_files() {
        let mut cfg = ExperimentConfig::load(&f).unwrap();
        cfg.scenario.horizon = cfg.scenario.horizon.min(60);
        cfg.scenario.replicates = cfg.scenario.replicates.min(2);
        cfg.memory.pairs = cfg.memory.pairs.min(3);
        let c = &mut cfg.criterion;
        c.bulk = c.bulk.min(60);
        c.shell = c.shell.min(40);
        c.draws = c.draws.min(20);
        let task = cfg.scenario.task;
        let exp = Experiment::new(cfg).unwrap();
        let opts = RunOptions {
            out_root: out.path().to_path_buf(),
            jobs: Some(1),
        };
        let outcome = run_task(&exp, &opts).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        assert!(!outcome.lines.is_empty());
        let dir = opts.scenario_dir(&exp);
        let expected = match task {
            Task::RunFilter => "run_filter.json",
            Task::EstimateCriterion => "criterion.json",
            Task::Boundedness => "boundedness.json",
            Task::MemoryLoss => "memory_loss.json",
        };
        assert!(dir.join(expected).exists(), "{}", f.display());
    }
}
