use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
seed = 9

[model]
sigma = [[0.2]]

[prior]
kind = "discrete"
atoms = [[-0.1], [0.0], [0.2]]
probs = [0.25, 0.5, 0.25]

[grid]
dt = 0.015625
paths = 300
"#;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hidden-drift")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn passing_run_exits_zero_and_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = bin(&["optimize", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "11"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["seed"], 11);
    assert_eq!(report["pass"], true);
    assert!(out.join("optimize.json").exists());
}

#[test]
fn json_format_writes_json_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = bin(&[
        "filter", "--config", &config, "--out", out.to_str().unwrap(), "--format", "json", "--paths", "20",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().all(|n| !n.ends_with(".csv")), "{names:?}");
    let trace: Value = serde_json::from_slice(&fs::read(out.join("filter_trace.json")).unwrap()).unwrap();
    assert!(trace["columns"].is_array() && trace["rows"].is_array());
}

#[test]
fn failed_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[converge]\nrefinements = [1, 2, 4]\nexpected_order = [5.0, 6.0]\n");
    let config = write(dir.path(), "converge.toml", &text);
    let o = bin(&["converge", "--config", &config, "--paths", "50"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL"));
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write(dir.path(), "typo.toml", &SMALL.replace("[grid]", "[grid]\nstep = 1"));
    assert_eq!(bin(&["simulate", "--config", &typo]).status.code(), Some(2));
    let config = write(dir.path(), "small.toml", SMALL);
    assert_eq!(bin(&["simulate", "--config", &config, "--paths", "1"]).status.code(), Some(2));
    assert_eq!(bin(&["simulate", "--config", "/nonexistent.toml"]).status.code(), Some(2));
}

#[test]
fn reruns_print_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[verify]\nidentities = [\"zbar_martingale\", \"budget\"]\n");
    let config = write(dir.path(), "verify.toml", &text);
    let a = bin(&["verify", "--config", &config, "--paths", "100"]);
    let b = bin(&["verify", "--config", &config, "--paths", "100"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}
