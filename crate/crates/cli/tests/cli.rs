use std::path::Path;
use std::process::{Command, Output};

fn mgsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgsim"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("mgsim runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn list_fixtures_names_every_fixture() {
    let o = mgsim(&["list-fixtures"]);
    assert_eq!(o.status.code(), Some(0));
    let out = String::from_utf8(o.stdout).unwrap();
    for n in ["toy3", "banshee7", "scenario1", "scenario2-1", "scenario2-2"] {
        assert!(out.lines().any(|l| l == n), "{n} missing");
    }
}

#[test]
fn every_fixture_validates() {
    let names = String::from_utf8(mgsim(&["list-fixtures"]).stdout).unwrap();
    for n in names.lines() {
        let o = mgsim(&["validate", "--fixture", n]);
        assert_eq!(o.status.code(), Some(0), "{n}: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("inverter"));
    }
}

#[test]
fn simulate_writes_trace_and_events() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = mgsim(&["simulate", "--fixture", "scenario1", "--out", out, "--layout", "fig9-style"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("scenario1/simulate");
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time,f_sys,balance_residual,"));
    assert!(trace.lines().count() > 100);
    let ev: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("events.json")).unwrap()).unwrap();
    assert_eq!(ev["status"], "completed");
    for f in ["fig9_dynamic.csv", "fig9_circle.csv", "fig9_vf.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn feasibility_writes_three_maps_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = mgsim(&[
        "feasibility",
        "--fixture",
        "toy3",
        "--load-factors",
        "1.02,1.05,1.08",
        "--out",
        out,
        "--workers",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = tmp.path().join("toy3/feasibility");
    for lf in ["1.02", "1.05", "1.08"] {
        let csv = std::fs::read_to_string(dir.join(format!("map_lf{lf}.csv"))).unwrap();
        let head = csv.lines().next().unwrap();
        assert!(head.starts_with("load_factor,alpha_inv"));
        assert!(head.contains(",delta_f,delta_v_bus"));
        assert!(head.ends_with(",feasible,solved"));
    }
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let s = s.as_array().unwrap();
    assert_eq!(s.len(), 3);
    assert!(s[0]["feasible"].as_u64().unwrap() > 0);
    assert_eq!(s[2]["feasible"], 0);
    assert!(s[2]["min_shed"].as_f64().unwrap() > 0.0);
}

#[test]
fn config_errors_exit_one_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let src = microgrid_core_fixture_toy3();
    let bad = src.replacen("\"k_df\"", "\"k_dff\"", 1);
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, bad).unwrap();
    let o = mgsim(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("inverters"), "{}", stderr(&o));

    let o = mgsim(&["validate", "--config", Path::new("/nonexistent.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = mgsim(&["simulate", "--fixture", "toy3", "--layout", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn collapse_exits_two_and_flags_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = mgsim(&["simulate", "--fixture", "scenario2-limiter-simultaneous", "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let ev = std::fs::read_to_string(tmp.path().join("scenario2-limiter-simultaneous/simulate/events.json")).unwrap();
    let ev: serde_json::Value = serde_json::from_str(&ev).unwrap();
    assert_eq!(ev["complete"], false);
    assert_eq!(ev["status"], "collapsed");
}

fn microgrid_core_fixture_toy3() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/toy3.json")).unwrap()
}
