use std::path::Path;
use std::process::Command;

fn lnhom(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lnhom")).args(args).output().unwrap()
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn sample_field_writes_records_fits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = lnhom(&[
        "sample-field",
        "--n", "32",
        "--replicas", "4",
        "--seed", "7",
        "--trunc-M", "none",
        "--threads", "2",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "records.csv", "fits.csv", "checks.csv", "manifest.json", "plots/moments_plot.csv"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["replicas_succeeded"], 4);
    assert_eq!(manifest["config"]["seed"], 7);
    assert_eq!(manifest["config"]["truncate"], false);
    assert!(manifest["files"]["records.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "kind = \"sample_field\"\nn = 16\nreplicas = 2\nseed = 3\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = lnhom(&[
        "sample-field",
        "--config", cfg.to_str().unwrap(),
        "--seed", "11",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(text.contains("n = 16"));
    assert!(text.contains("seed = 11"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let o = out_dir.to_str().unwrap();
    assert_eq!(code(&lnhom(&["correctors", "--n", "12", "--out", o])), 2);
    assert_eq!(code(&lnhom(&["correctors", "--amplitude", "-1", "--out", o])), 2);
    assert_eq!(code(&lnhom(&["correctors", "--trunc-M", "0.5", "--out", o])), 2);
    assert_eq!(code(&lnhom(&["correctors", "--cov-family", "matern", "--out", o])), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "kind = \"radii\"\n").unwrap();
    assert_eq!(code(&lnhom(&["correctors", "--config", cfg.to_str().unwrap(), "--out", o])), 2);
    assert_eq!(code(&lnhom(&["correctors", "--config", "/nonexistent.toml", "--out", o])), 2);
    assert!(!Path::new(o).join("records.csv").exists());
}

#[test]
fn replica_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "max_iter = 1\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = lnhom(&[
        "correctors",
        "--config", cfg.to_str().unwrap(),
        "--n", "16",
        "--replicas", "3",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let replicas = std::fs::read_to_string(out_dir.join("replicas.csv")).unwrap();
    assert_eq!(replicas.matches(",failed,").count(), 3);
}
