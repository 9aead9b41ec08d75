use std::fs;
use std::process::Command;

use serde_json::Value;

use pmelab_cli::config::{ExperimentConfig, Mode};
use pmelab_cli::manifest::{sha256_hex, MANIFEST};
use pmelab_cli::phantom::Phantom;
use pmelab_cli::run::{run, RunError};
use pmelab_cli::selftest::{builtin, builtin_text};

fn pmelab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmelab"))
}

#[test]
fn zero_data_forward_passes_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = builtin(Mode::Forward);
    cfg.data.g = Phantom::zero();
    let m = run(&cfg, Mode::Forward, dir.path()).unwrap();
    assert!(m.all_pass(), "{:?}", m.failures().collect::<Vec<_>>());
    // zero data: only the 1/k regularization remains, so u_k stays within
    // [1/k, (1 + T/min eps)/k]
    let k = cfg.params.k_schedule.last().copied().unwrap();
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("forward.json")).unwrap()).unwrap();
    let (lo, hi) = (summary["min"].as_f64().unwrap(), summary["max"].as_f64().unwrap());
    assert!(lo >= 1.0 / k - 1e-15 && hi <= 1.5 / k, "{lo:e} {hi:e}");
}

#[test]
fn malformed_q_is_rejected_with_the_window() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, builtin_text(Mode::Forward).replace("q = 1.2", "q = 1.6")).unwrap();
    let out = pmelab().args(["forward", "--config"]).arg(&path).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("m⁻¹<q<√m"), "{err}");
}

#[test]
fn manifest_lists_and_hashes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = pmelab().args(["transform", "--seed", "5", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(m["mode"], "transform");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["resolved"]["alpha"], 2.0);
    let files = m["files"].as_array().unwrap();
    let on_disk = fs::read_dir(dir.path()).unwrap().count() - 1;
    assert_eq!(files.len(), on_disk);
    for f in files {
        let bytes = fs::read(dir.path().join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), sha256_hex(&bytes));
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    let mut effective = builtin(Mode::Transform);
    effective.seed = 5;
    let expected = sha256_hex(effective.canonical().as_bytes());
    assert_eq!(m["config_hash"].as_str().unwrap(), expected);
}

#[test]
fn failed_invariant_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("strict.toml");
    fs::write(&path, builtin_text(Mode::Recover).replace("max_rel_error = 0.15", "max_rel_error = 1e-6")).unwrap();
    let out = pmelab().args(["recover", "--config"]).arg(&path).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn mode_requirements_are_checked_at_run_time() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: ExperimentConfig = builtin(Mode::Forward);
    assert!(matches!(run(&cfg, Mode::Partial, dir.path()), Err(RunError::Config(_))));
}
