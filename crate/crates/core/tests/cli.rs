use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_mfg-lab");

fn run(dir: &Path, config: &Value, extra: &[&str]) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, serde_json::to_string_pretty(config).unwrap()).unwrap();
    let out = dir.join("out");
    Command::new(BIN)
        .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("out/summary.json")).unwrap()).unwrap()
}

fn zeros() -> Value {
    json!([[0.0, 0.0], [0.0, 0.0]])
}

#[test]
fn list_prints_catalog() {
    let out = Command::new(BIN).arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 17);
    assert!(text.contains("higher-order-fp"));
}

#[test]
fn zero_coupling_is_stationary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({
        "scenario": "master-noiseless",
        "params": {
            "grid": { "lower": [0.0, 0.0], "upper": [1.0, 1.0], "nodes": [11, 11] },
            "coupling": { "a": zeros(), "b": zeros(), "c": zeros(), "d": zeros() },
            "t_f": 0.5,
            "dt": 0.05,
        },
    });
    let out = run(tmp.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("out/trajectory.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "time,node,x_0,x_1,component,value");
    let mut initial = std::collections::HashMap::new();
    let mut times = std::collections::BTreeSet::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        times.insert(cols[0].to_string());
        let key = (cols[1].to_string(), cols[4].to_string());
        let prev = initial.entry(key).or_insert_with(|| cols[5].to_string());
        assert_eq!(prev, cols[5]);
    }
    assert!(times.len() > 2);
}

#[test]
fn threshold_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &json!({ "scenario": "uniqueness-threshold", "params": { "c": 1.0, "horizon": 1.0 } }), &[]);
    assert_eq!(out.status.code(), Some(0));
    let s = summary(tmp.path());
    assert_eq!(s["results"]["threshold"], json!(2.0));
    assert_eq!(s["failed"], json!(false));
}

#[test]
fn negative_dt_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &json!({ "scenario": "master-noiseless", "params": { "dt": -0.1 } }), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("out/trajectory.csv").exists());
    assert_eq!(summary(tmp.path())["failed"], json!(true));
}

#[test]
fn unknown_scenario_lists_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &json!({ "scenario": "master-quantum" }), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("master-poisson-iid") && err.contains("relative-cost"));
}

#[test]
fn unknown_param_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &json!({ "scenario": "abm-path", "params": { "rates": 2.0 } }), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({ "scenario": "master-noiseless", "params": { "dt": 1.0 } });
    let out = run(tmp.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(3));
    let s = summary(tmp.path());
    assert_eq!(s["failed"], json!(true));
    assert!(s["error"].as_str().unwrap().contains("CFL"));
}

#[test]
fn defaults_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &json!({ "scenario": "mfg-lambda-sweep", "params": { "lambdas": [8.0] } }), &[]);
    assert_eq!(out.status.code(), Some(0));
    let p = &summary(tmp.path())["params"];
    assert_eq!(p["model"]["picard"]["damping"], json!(0.5));
    assert_eq!(p["model"]["picard"]["max_iter"], json!(200));
    assert_eq!(p["model"]["picard"]["tol"], json!(1e-7));
}

#[test]
fn seed_and_thread_count_do_not_change_output() {
    let cfg = json!({ "scenario": "mc-value", "seed": 11, "params": { "n_paths": 400 } });
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path(), &cfg, &["--threads", "1"]).status.code(), Some(0));
    assert_eq!(run(b.path(), &cfg, &["--threads", "4"]).status.code(), Some(0));
    assert_eq!(run(c.path(), &cfg, &["--seed", "12"]).status.code(), Some(0));
    let read = |d: &Path| fs::read(d.join("out/mc_value.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
    assert_eq!(summary(c.path())["seed"], json!(12));
}
