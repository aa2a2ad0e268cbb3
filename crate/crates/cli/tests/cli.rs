use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn scaleguard(args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scaleguard"));
    cmd.args(args).env_remove("SCALEGUARD_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &std::path::Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: &[&str] = &["--dtype", "q2.5", "--rounds", "50", "--grid", "-0.5,0.5,0.25", "--constants", "1,3"];

#[test]
fn curves_to_stdout_and_file_agree() {
    let stdout = run(scaleguard(&["curves"]).args(SMALL)).stdout;
    let csv = String::from_utf8(stdout).unwrap();
    assert!(csv.starts_with("weight,constant,dtype,ber,rounds,mean_abs_error,finite_fraction\n"));
    assert_eq!(csv.lines().count(), 1 + 5 * 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curves.csv");
    run(scaleguard(&["curves", "--out", path.to_str().unwrap()]).args(SMALL));
    assert_eq!(fs::read_to_string(&path).unwrap(), csv);
}

#[test]
fn bad_dtype_prints_error_line() {
    let out = scaleguard(&["curves", "--dtype", "int8"]).output().unwrap();
    assert!(!out.status.success());
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "unknown_dtype");
    assert!(line["message"].as_str().unwrap().contains("int8"));
}

#[test]
fn grid_needs_three_values() {
    let out = scaleguard(&["curves", "--grid", "0,1"]).output().unwrap();
    assert!(!out.status.success());
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"], "invalid_config");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "dtype = \"fp16\"\nrounds = 20\nseed = 11\nconstants = [1.0]\ngrid = [0.0, 0.5, 0.5]\noutput = \"from_file.json\"\n",
    )
    .unwrap();
    run(&mut scaleguard(&["curves", "--config", cfg.to_str().unwrap(), "--rounds", "30"]));

    // The relative output path resolves next to the config file.
    let v = read_json(&dir.path().join("from_file.json"));
    assert_eq!(v["config"]["dtype"], "fp16");
    assert_eq!(v["config"]["seed"], 11);
    assert_eq!(v["config"]["rounds"], 30);
}

#[test]
fn seed_env_is_below_flags() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("env.json");
    let flag_out = dir.path().join("flag.json");
    run(scaleguard(&["curves", "--out", env_out.to_str().unwrap()])
        .args(SMALL)
        .env("SCALEGUARD_SEED", "99"));
    run(scaleguard(&["curves", "--seed", "5", "--out", flag_out.to_str().unwrap()])
        .args(SMALL)
        .env("SCALEGUARD_SEED", "99"));
    assert_eq!(read_json(&env_out)["seed"], 99);
    assert_eq!(read_json(&flag_out)["seed"], 5);
}

#[test]
fn garbage_seed_env_is_an_error() {
    let out = scaleguard(&["curves"])
        .args(SMALL)
        .env("SCALEGUARD_SEED", "abc")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(line["message"].as_str().unwrap().contains("SCALEGUARD_SEED"));
}

#[test]
fn verify_passes() {
    let out = run(&mut scaleguard(&["verify", "--rounds", "2000", "--seed", "1"]));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.lines().count() >= 4);
    assert!(report.lines().all(|l| l.starts_with("PASS ")), "{report}");
}
