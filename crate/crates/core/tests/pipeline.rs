use std::fs;
use std::path::Path;
use std::process::Command;

use advlab::harness::report::{read_report, CSV_COLUMNS};
use advlab::harness::{emit_plots, load_checkpoint, run_experiment, ExperimentConfig};

fn easy(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("blobs-easy").unwrap();
    cfg.output_dir = Some(out.to_path_buf());
    cfg
}

#[test]
fn blobs_easy_writes_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = easy(dir.path());
    let run = run_experiment(&cfg).unwrap();
    assert!(run.succeeded(), "{:?}", run.failures);

    let rows = read_report(&dir.path().join("report.csv")).unwrap();
    let header = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), CSV_COLUMNS.join(","));
    let schedule = cfg.train.schedule.clone().unwrap();
    assert_eq!(rows.len(), schedule.len() * cfg.seeds.len());
    assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), schedule);
    for r in &rows {
        for c in CSV_COLUMNS.iter().skip(2) {
            assert!(r.column(c).is_some_and(f64::is_finite), "t={} column {c} missing", r.t);
        }
        assert!(r.rob_test_err.unwrap() >= r.std_test_err.unwrap());
    }
    for d in &run.diagnostics {
        assert_eq!(d.bound_holds, Some(true));
    }
    for f in ["config.toml", "diagnostics.csv", "histograms.csv", "summary.json", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ck = load_checkpoint(&dir.path().join("checkpoints/seed-0/t-0006.ckpt")).unwrap();
    assert_eq!(ck.t, 6);

    let plots = emit_plots(&dir.path().join("report.csv"), Some(&dir.path().join("histograms.csv")), dir.path()).unwrap();
    assert!(plots.files.iter().any(|f| f.ends_with("errors.svg")));
    assert!(plots.files.iter().all(|f| f.exists()));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&easy(a.path())).unwrap();
    run_experiment(&easy(b.path())).unwrap();
    for f in ["report.csv", "diagnostics.csv", "histograms.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_radius_gives_constant_ide_and_zero_dispersion() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = easy(dir.path());
    cfg.attack.epsilon = 0.0;
    let run = run_experiment(&cfg).unwrap();
    assert!(run.succeeded(), "{:?}", run.failures);
    let ide: Vec<f64> = run.rows.iter().map(|r| r.ide_test_err.unwrap()).collect();
    assert!(ide.windows(2).all(|w| w[0] == w[1]), "{ide:?}");
    for r in &run.rows {
        assert_eq!(r.eld, Some(0.0));
        assert_eq!(r.mean_d, Some(0.0));
        assert_eq!(r.rob_train_err, r.std_train_err);
        assert_eq!(r.rob_test_err, r.std_test_err);
    }
}

#[test]
fn cli_bound_prints_value() {
    let out = Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(["bound", "--beta", "1", "--loss-bound", "1", "--dim", "4", "--epsilon", "0.1", "--m", "100", "--eld", "0.01"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((v - 0.5047746830680817).abs() < 1e-12);
}

#[test]
fn cli_rejects_invalid_bound_input() {
    let out = Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(["bound", "--beta", "1", "--loss-bound", "1", "--dim", "4", "--epsilon", "0.1", "--m", "0", "--eld", "0.01"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn cli_run_with_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(["--preset", "blobs-easy", "--out"])
        .arg(dir.path())
        .arg("run")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["name"], "blobs-easy");
    assert!(dir.path().join("errors.svg").exists());
}

#[test]
fn cli_unknown_preset_fails() {
    let out = Command::new(env!("CARGO_BIN_EXE_advlab"))
        .args(["--preset", "nope", "run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
