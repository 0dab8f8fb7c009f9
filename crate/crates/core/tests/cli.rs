//! Command-line contract: subcommands, outputs and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mpcrl"));
    c.env("RUST_LOG", "error");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["lq_reinforce.toml", "cstr_vfmpc.toml", "oracle_suite.toml"] {
        let out = bin().args(["validate", "--config"]).arg(configs().join(name)).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("oracle_suite.toml")).unwrap() + "\nmdsp = 3\n";
    let cfg = write(tmp.path(), "bad.toml", &text);
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = bin().args(["validate", "--config", "/nonexistent/x.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_without_output_dir_is_a_config_error() {
    let out = bin().args(["run", "--config"]).arg(configs().join("oracle_suite.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_suite_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["oracle-suite", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "curves.csv", "summary.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    for suite in ["bellman", "riccati_mpc", "sensitivity", "td_fixed_point"] {
        assert_eq!(summary[suite]["passed"], serde_json::json!(true), "{suite}");
    }
}

#[test]
fn value_fit_over_limit_is_a_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("cstr_vfmpc.toml"))
        .unwrap()
        .replace("rmse_max = 0.05", "rmse_max = 1e-12")
        .replace("rollouts = 200", "rollouts = 4");
    let cfg = write(tmp.path(), "cstr.toml", &text);
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rmse"));
}

#[test]
fn seed_and_reps_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("lq_reinforce.toml"))
        .unwrap()
        .replace("episodes = 20", "episodes = 1")
        .replace("batch = 16", "batch = 2")
        .replace("steps = 20", "steps = 5");
    let cfg = write(tmp.path(), "lq.toml", &text);
    let run = |seed: &str, dir: &str| {
        let out = bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--reps", "2", "--out"])
            .arg(tmp.path().join(dir))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read_to_string(tmp.path().join(dir).join("metrics.csv")).unwrap()
    };
    let a = run("1", "a");
    let b = run("2", "b");
    // Header plus (episodes + 1) rows for each of the two runs.
    assert_eq!(a.lines().count(), 1 + 2 * 2);
    let j = |text: &str| text.lines().nth(1).unwrap().split(',').nth(2).unwrap().to_string();
    assert_ne!(j(&a), j(&b));
}
