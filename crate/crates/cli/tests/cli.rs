use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nplcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nplcm")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = nplcm(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_sim2(dir: &Path, seed: &str) {
    ok(&["simulate", "--scenario", "sim2", "--grid", "0", "--seed", seed, "--out", s(dir)]);
}

fn small_fit(sim: &Path, out: &Path) {
    ok(&[
        "fit",
        "--data",
        s(&sim.join("dataset.csv")),
        "--model",
        s(&sim.join("model.json")),
        "--priors",
        s(&sim.join("priors.json")),
        "--chains",
        "2",
        "--burnin",
        "40",
        "--keep",
        "40",
        "--checkpoint-every",
        "25",
        "--seed",
        "5",
        "--out",
        s(out),
    ]);
}

#[test]
fn unknown_scenario_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = nplcm(&["simulate", "--scenario", "nope", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
    let out = nplcm(&["replicate", "--scenario", "nope", "--reps", "1", "--out", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&["simulate", "--scenario", "sim1", "--seed", "7", "--out", s(a.path())]);
    ok(&["simulate", "--scenario", "sim1", "--seed", "7", "--out", s(b.path())]);
    for f in ["dataset.csv", "truth.csv", "provenance.json", "model.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    ok(&["simulate", "--scenario", "sim1", "--seed", "8", "--out", s(c.path())]);
    assert_ne!(fs::read(a.path().join("dataset.csv")).unwrap(), fs::read(c.path().join("dataset.csv")).unwrap());
}

#[test]
fn grid_point_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--scenario", "sim2", "--grid", "13", "--out", s(dir.path())]);
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("truth_config.json")).unwrap()).unwrap();
    assert_eq!(truth["notes"]["grid_index"], 13);
    let out = nplcm(&["simulate", "--scenario", "sim2", "--grid", "48", "--out", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn truth_file_round_trips() {
    let a = tempfile::tempdir().unwrap();
    simulate_sim2(a.path(), "3");
    let b = tempfile::tempdir().unwrap();
    ok(&["simulate", "--truth", s(&a.path().join("truth_config.json")), "--seed", "3", "--out", s(b.path())]);
    assert_eq!(fs::read(a.path().join("dataset.csv")).unwrap(), fs::read(b.path().join("dataset.csv")).unwrap());
}

#[test]
fn fit_diagnose_summarize_pipeline() {
    let sim = tempfile::tempdir().unwrap();
    simulate_sim2(sim.path(), "2");
    let fit = tempfile::tempdir().unwrap();
    small_fit(sim.path(), fit.path());
    for f in ["manifest.json", "address_book.json", "chain_0.csv", "chain_1.csv", "dataset.csv", "checkpoints/chain_0.json"] {
        assert!(fit.path().join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(fit.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["data_digest"].as_str().unwrap().len(), 64);

    let out = ok(&["diagnose", "--draws", s(fit.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Rc"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(fit.path().join("diagnostics.json")).unwrap()).unwrap();
    assert!(!report["entries"].as_array().unwrap().is_empty());

    let out = ok(&["summarize", "--draws", s(fit.path()), "--what", "overall"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "grid,label,mean,sd,lo,hi");
    assert_eq!(lines.len(), 1 + 3);
    let total: f64 = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let grid = sim.path().join("grid.csv");
    fs::write(&grid, "x_one,x_s2,w_one,w_s2\n1,0,1,0\n1,1,1,1\n").unwrap();
    let pef = fit.path().join("pef.csv");
    ok(&["summarize", "--draws", s(fit.path()), "--what", "pef", "--grid", s(&grid), "--out", s(&pef)]);
    assert_eq!(fs::read_to_string(&pef).unwrap().lines().count(), 1 + 2 * 3);
    let out = ok(&["summarize", "--draws", s(fit.path()), "--what", "rates", "--grid", s(&grid)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1 + 2 * 3 * 2);
    let out = ok(&["summarize", "--draws", s(fit.path()), "--what", "ief"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1 + 500 * 3);

    let out = nplcm(&["summarize", "--draws", s(fit.path()), "--what", "pef"]);
    assert!(!out.status.success(), "pef without a grid must fail");
}

#[test]
fn missing_artifacts_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!nplcm(&["diagnose", "--draws", s(dir.path())]).status.success());
    assert!(!nplcm(&["summarize", "--draws", s(dir.path()), "--what", "overall"]).status.success());
    assert!(!nplcm(&["fit", "--data", s(&dir.path().join("none.csv")), "--model", "m.json", "--out", s(dir.path())]).status.success());
}

#[test]
fn rerun_resumes_from_checkpoints() {
    let sim = tempfile::tempdir().unwrap();
    simulate_sim2(sim.path(), "4");
    let a = tempfile::tempdir().unwrap();
    small_fit(sim.path(), a.path());
    let first = fs::read(a.path().join("chain_1.csv")).unwrap();
    fs::remove_file(a.path().join("chain_1.csv")).unwrap();
    small_fit(sim.path(), a.path());
    assert_eq!(first, fs::read(a.path().join("chain_1.csv")).unwrap());
    let b = tempfile::tempdir().unwrap();
    small_fit(sim.path(), b.path());
    assert_eq!(first, fs::read(b.path().join("chain_1.csv")).unwrap());
}

#[test]
fn replicate_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "replicate", "--scenario", "sim2", "--grid", "0", "--reps", "2", "--parallel", "2", "--chains", "1", "--burnin", "20", "--keep",
        "20", "--out", s(dir.path()),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("coverage"));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.as_array().unwrap().len(), 3);
    assert_eq!(metrics[0]["replications"], 2);
}
