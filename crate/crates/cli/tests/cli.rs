use std::path::Path;
use std::process::{Command, Output};

fn atg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_data_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&atg(&["scan", "--out", s(dir.path())])), 2);
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&atg(&["scan", "--data", "synthetic", "--out", s(dir.path()), "--no_such_key=1"])), 2);
    assert_eq!(code(&atg(&["scan", "--data", "synthetic", "--out", s(dir.path()), "--epochs=x"])), 2);
    assert_eq!(code(&atg(&["scan", "--data", "synthetic", "--threads", "0", "--out", s(dir.path())])), 2);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&atg(&["scan", "--data", "synthetic", "--config", s(&cfg), "--out", s(dir.path())])), 2);
}

#[test]
fn missing_manifest_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = atg(&["scan", "--data", s(&dir.path().join("absent.json")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn small_grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = atg(&["grad-check", "--small", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("grad_check.json").exists());
}

#[test]
fn scan_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = atg(&["scan", "--data", "synthetic", "--out", s(dir.path()), "--synthetic_per_class=2"]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(dir.path().join("window_scan.csv")).unwrap();
    assert!(csv.starts_with("w,H_bar,H_norm,n\n"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train");
    let small = ["--synthetic_per_class=4", "--epochs=1", "--folds=2", "--window=16"];
    let mut args = vec!["train", "--data", "synthetic", "--out", s(&train)];
    args.extend(small);
    let o = atg(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = train.join("model.atm");
    assert!(model.exists());

    let ok = dir.path().join("ok");
    let mut args = vec!["eval", "--model", s(&model), "--data", "synthetic", "--out", s(&ok)];
    args.extend(small);
    assert_eq!(code(&atg(&args)), 0);
    assert!(ok.join("report.json").exists());

    let bad = dir.path().join("bad");
    let o = atg(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        "synthetic",
        "--out",
        s(&bad),
        "--synthetic_per_class=4",
        "--window=20",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!bad.exists());
}
