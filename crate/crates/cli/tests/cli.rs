use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use periodic_homog::config::parse_config;
use serde_json::Value;

fn phomog(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phomog")).args(args).output().expect("spawn phomog")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn centered_config(eps: &str) -> String {
    format!(
        r#"{{
  "dimension": 1,
  "a_tilde": [["1"]],
  "b_tilde": ["cos(2*pi*y1)"],
  "grid": [256],
  "problem": {{ "domain": [[0, 1]], "f": "1", "g": "0", "eps": {eps}, "mesh_per_period": 64 }}
}}"#
    )
}

#[test]
fn preset_output_parses_back() {
    for name in ["identity", "centered-1d", "noncentered-1d", "laminated-2d", "shear-2d", "harmonic-1d"] {
        let out = phomog(&["preset", name]);
        assert_eq!(code(&out), 0, "{name}");
        let text = String::from_utf8(out.stdout).unwrap();
        parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    assert_eq!(code(&phomog(&["preset", "nope"])), 2);
}

#[test]
fn validate_writes_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = phomog(&["validate", "--preset", "shear-2d", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = read_json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["tool"], "phomog");
    assert_eq!(manifest["subcommand"], "validate");
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(files.contains(&"validate.json"), "{files:?}");
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "dimension": 1, "a_tilde": [["1"]], "b_tilde": ["sin(x1)"], "grid": [16] }"#).unwrap();
    let out = phomog(&["validate", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{ "dimension": 1, "a_tilde": [["1"]], "b_tilde": ["0"], "grid": [16], "colour": 1 }"#).unwrap();
    assert_eq!(code(&phomog(&["validate", unknown.to_str().unwrap()])), 2);
    assert_eq!(code(&phomog(&["validate", dir.path().join("missing.json").to_str().unwrap()])), 2);
    assert_eq!(code(&phomog(&["measure", "--preset", "nope"])), 2);
}

#[test]
fn noncentered_measure_exits_3_but_keeps_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = phomog(&["measure", "--preset", "noncentered-1d", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    let report = read_json(&dir.path().join("measure.json"));
    let defect = report["centering_defect"][0].as_f64().unwrap();
    assert!((defect - 1.0).abs() < 1e-10, "{defect}");
    let forced = phomog(&["counterexample", "--preset", "noncentered-1d", "--check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&forced), 0, "{}", String::from_utf8_lossy(&forced.stderr));
}

#[test]
fn centered_run_passes_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = phomog(&["all", "--preset", "centered-1d", "--check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["all_checks_pass"], true);
    for f in ["rates.json", "rates.csv", "m.tfld", "m.csv", "chi.tfld"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn failed_threshold_exits_5_only_with_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("coarse.json");
    fs::write(&cfg, centered_config("[1.0, 0.5, 0.25, 0.125]")).unwrap();
    let out_dir = dir.path().join("out");
    let args = ["rates", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()];
    assert_eq!(code(&phomog(&args)), 0);
    let mut checked = args.to_vec();
    checked.push("--check");
    let out = phomog(&checked);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(read_json(&out_dir.join("summary.json"))["all_checks_pass"], false);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = (0..2)
        .map(|k| {
            let out = dir.path().join(format!("run{k}"));
            let o = phomog(&["all", "--preset", "centered-1d", "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0);
            out
        })
        .collect();
    let mut names: Vec<_> = fs::read_dir(&runs[0]).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 4);
    for name in names {
        if name == "manifest.json" {
            continue;
        }
        let a = fs::read(runs[0].join(&name)).unwrap();
        let b = fs::read(runs[1].join(&name)).unwrap();
        assert!(a == b, "{name:?} differs between runs");
    }
    let mut m0 = read_json(&runs[0].join("manifest.json"));
    let mut m1 = read_json(&runs[1].join("manifest.json"));
    m0["created_unix"] = Value::Null;
    m1["created_unix"] = Value::Null;
    assert_eq!(m0, m1);
}
