//! Drives the command-line binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_histclosure");

pub fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs");
    out
}

pub fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Each step as (manifest name, subcommand arguments).
pub fn pipeline() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("simulate", vec!["simulate"]),
        ("train_history", vec!["train"]),
        ("train_instantaneous", vec!["--variant", "instantaneous", "train"]),
        ("hmc_history", vec!["hmc"]),
        ("hmc_instantaneous", vec!["--variant", "instantaneous", "hmc"]),
        ("forecast_history_deterministic", vec!["forecast", "--source", "checkpoint"]),
        ("forecast_history_bayesian", vec!["forecast", "--source", "chain"]),
        (
            "forecast_instantaneous_deterministic",
            vec!["--variant", "instantaneous", "forecast", "--source", "checkpoint"],
        ),
        (
            "forecast_instantaneous_bayesian",
            vec!["--variant", "instantaneous", "forecast", "--source", "chain"],
        ),
        ("uq_sweep", vec!["uq-sweep", "--forcings", "5,15", "--noises", "0.03,0.1"]),
    ]
}

pub fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

pub fn manifest_without_config(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.as_object_mut().unwrap().remove("config");
    v
}

/// Runs the toy pipeline from the preset, then reruns every step from the
/// manifest it wrote into a fresh directory. Returns the names of files
/// whose bytes differ.
pub fn rerun_differences(root: &Path) -> Vec<String> {
    let first: PathBuf = root.join("first");
    let second: PathBuf = root.join("second");
    let first_s = first.to_str().unwrap();
    let second_s = second.to_str().unwrap();
    for (_, args) in pipeline() {
        let mut a = vec!["--preset", "toy", "--output-dir", first_s];
        a.extend(args);
        ok(&a);
    }
    for (name, args) in pipeline() {
        let manifest = first.join(format!("manifest.{name}.json"));
        let mut a = vec!["--config", manifest.to_str().unwrap(), "--output-dir", second_s];
        a.extend(args);
        ok(&a);
    }
    let a = files(&first);
    let b = files(&second);
    let mut diffs = Vec::new();
    if a.keys().ne(b.keys()) {
        diffs.push("file sets differ".into());
    }
    for (name, bytes) in &a {
        let Some(other) = b.get(name) else { continue };
        let same = if name.starts_with("manifest.") {
            manifest_without_config(bytes) == manifest_without_config(other)
        } else {
            bytes == other
        };
        if !same {
            diffs.push(name.clone());
        }
    }
    diffs
}
