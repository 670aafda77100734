//! Drives the `spiro` binary end to end in a scratch directory.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn spiro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spiro")).args(args).output().expect("spawn spiro")
}

pub fn ok(args: &[&str]) -> Output {
    let out = spiro(args);
    assert!(
        out.status.success(),
        "spiro {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Small synth -> preprocess -> train -> eval run; returns (dataset, model dir, csv).
pub fn small_run(dir: &Path, n: usize, seeds: &str) -> (PathBuf, PathBuf, PathBuf) {
    let cohort = dir.join("cohort.ndjson");
    let data = dir.join("data.spds");
    let models = dir.join("models");
    let csv = dir.join("metrics.csv");
    let config = dir.join("pipeline.json");
    std::fs::write(&config, r#"{"mlp": {"epochs": 5}, "model": {"head_hidden": 8}}"#).unwrap();
    ok(&["synth", "--n", &n.to_string(), "--seed", "3", "--out", s(&cohort)]);
    ok(&["preprocess", "--in", s(&cohort), "--out", s(&data)]);
    ok(&[
        "train", "--endpoint", "copd_risk", "--data", s(&data), "--config", s(&config), "--out", s(&models),
        "--seeds", seeds, "--desk", "--epochs", "2", "--d-embed", "8", "--layers", "1", "--gbdt-rounds", "5",
    ]);
    ok(&[
        "eval", "--endpoint", "copd_risk", "--data", s(&data), "--models", s(&models), "--seeds", seeds, "--csv",
        s(&csv),
    ]);
    (data, models, csv)
}
