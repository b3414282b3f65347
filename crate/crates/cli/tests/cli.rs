use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn feedrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feedrep")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "theta1": 0.05,
        "seed": 3,
        "output_dir": dir.join("out"),
        "n_train": 24,
        "n_held_out": 8,
        "dataset": { "patch_size": 8 },
        "train": { "epochs": 3, "hidden_sizes": [8], "learning_rate": 0.5, "batch_size": 8 },
        "stats": { "grid": [0.5], "mc_n": 2000, "moment_thetas": [0.1] }
    });
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stats_writes_scan_and_moments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = feedrep(&["stats", "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/corr_scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("theta1,exact_corr,asymptotic_corr,mc_corr,mc_n,seed\n"));
    assert!(dir.path().join("out/moments_0.1.json").is_file());
    assert!(dir.path().join("out/moments_0.05.json").is_file());
}

#[test]
fn out_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let other = dir.path().join("elsewhere");
    let out = feedrep(&["control", "--config", s(&cfg), "--out", s(&other)]);
    assert!(out.status.success());
    let csv = fs::read_to_string(other.join("identity_gap.csv")).unwrap();
    assert!(csv.starts_with("preset,omega,open_loop_gap,closed_loop_gap\n"));
    assert!(csv.lines().any(|l| l.starts_with("integrator,0,") && l.ends_with(",0")));
}

#[test]
fn seed_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(feedrep(&["stats", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(feedrep(&["stats", "--config", s(&cfg), "--out", s(&b), "--seed", "99"]).status.success());
    assert_ne!(fs::read(a.join("corr_scan.csv")).unwrap(), fs::read(b.join("corr_scan.csv")).unwrap());
}

#[test]
fn generated_dataset_feeds_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let gen = dir.path().join("gen");
    assert!(feedrep(&["generate", "--config", s(&cfg), "--out", s(&gen)]).status.success());
    let from_file = dir.path().join("file");
    let direct = dir.path().join("direct");
    let ds = gen.join("dataset.bin");
    let out = feedrep(&["train", "--config", s(&cfg), "--out", s(&from_file), "--dataset", s(&ds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(feedrep(&["train", "--config", s(&cfg), "--out", s(&direct)]).status.success());
    for name in ["metrics.json", "phi1.model", "detector.model", "loss_phi1.csv", "loss_detector.csv"] {
        assert_eq!(fs::read(from_file.join(name)).unwrap(), fs::read(direct.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn compare_detectors_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(feedrep(&["compare-detectors", "--config", s(&cfg)]).status.success());
    let text = fs::read_to_string(dir.path().join("out/compare.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["inverse", "naive"] {
        assert!(v[key]["mae_super_threshold_compensated"].is_number(), "{key}");
    }
    assert_eq!(v["coupling"]["naive_target_residual_corr"], 1.0);
}

#[test]
fn missing_config_is_io_error() {
    let out = feedrep(&["stats", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"theta1": 1.5}"#).unwrap();
    let out = feedrep(&["stats", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unwritable_output_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = feedrep(&["stats", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let path = dir.path().join("hot.json");
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["learning_rate"] = serde_json::json!(1e200);
    v["train"]["loss_kind"] = serde_json::json!("l2");
    fs::write(&path, v.to_string()).unwrap();
    let out = feedrep(&["train", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_error_exits_1() {
    assert_eq!(feedrep(&["stats"]).status.code(), Some(1));
    assert_eq!(feedrep(&["bogus"]).status.code(), Some(1));
    assert_eq!(feedrep(&["--help"]).status.code(), Some(0));
}
