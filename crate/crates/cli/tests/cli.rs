use std::path::Path;
use std::process::Command;

fn xdhom() -> Command {
    Command::new(env!("CARGO_BIN_EXE_xdhom"))
}

fn config(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn check_prints_report_json() {
    let out = xdhom()
        .args(["check", "--model", "biofilm", "--samples", "50"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["model"], "biofilm");
    assert_eq!(v["violation_count"], 0);
}

#[test]
fn unknown_model_is_a_config_error() {
    let out = xdhom().args(["check", "--model", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inadmissible_parameters_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("p.json");
    std::fs::write(&params, r#"{"beta": 1.0, "theta": 5.0}"#).unwrap();
    let out = xdhom()
        .args(["check", "--model", "tumor", "--params"])
        .arg(&params)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("macro.json")).unwrap()).unwrap();
    v["time"]["dtt"] = serde_json::json!(1.0);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = xdhom()
        .args(["macro", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = xdhom()
        .args(["cell", "--config"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eps_that_does_not_tile_the_domain_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = xdhom()
        .args(["micro", "--config"])
        .arg(config("micro.json"))
        .args(["--eps", "0.3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn macro_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = xdhom()
        .args(["macro", "--config"])
        .arg(config("macro.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,H,production,mass_1,mass_2,newton_iters,dt"
    );
    assert_eq!(lines.count(), 101);
}
