use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maxhom::experiment::exit_code;
use maxhom::Error;

fn preset(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name);
    std::fs::read_to_string(p).unwrap()
}

fn run(dir: &Path, config: &str, args: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_maxhom"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .env_remove("MAXHOM_WORKERS")
        .output()
        .unwrap();
    (o, out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_passes_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset("micro-constant.toml");
    let (o, out) = run(dir.path(), &text, &["validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().last() == Some("PASS"), "{stdout}");

    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.starts_with("PASS")), "{summary}");
    assert!(summary.contains("measure_invariance"), "{summary}");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|f| f["file"] == "validate.json" && f["sha256"].as_str().map_or(false, |h| h.len() == 64)), "{manifest}");
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset("micro-constant.toml").replace("seed = 11", "");
    let (o, _) = run(dir.path(), &text, &["validate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn seed_flag_supplies_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset("micro-constant.toml").replace("seed = 11", "");
    let (o, out) = run(dir.path(), &text, &["validate", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn every_config_error_is_reported_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset("micro-constant.toml")
        .replace("seed = 11", "colour = \"red\"")
        .replace("values = [0.25, 0.125]", "values = [0.125, 0.25]");
    let (o, _) = run(dir.path(), &text, &["eps_run"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for needle in ["colour", "seed", "decreasing"] {
        assert!(err.contains(needle), "missing `{needle}` in: {err}");
    }
}

#[test]
fn zero_workers_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = run(dir.path(), &preset("micro-constant.toml"), &["validate", "--workers", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn weak_conductivity_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let text = preset("micro-constant.toml").replace("value = 1.5", "value = 0.5");
    let (o, out) = run(dir.path(), &text, &["validate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("FAIL")), "{summary}");
}

#[test]
fn inapplicable_cross_validation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (o, _) = run(dir.path(), &preset("checkerboard.toml"), &["cross_validate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(exit_code(&Err(Error::Numerical("diverged".into()))), 3);
    assert_eq!(exit_code(&Err(Error::Config("bad".into()))), 2);
    assert_eq!(exit_code(&Err(Error::Input("bad".into()))), 2);
}
