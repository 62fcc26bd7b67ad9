//! End-to-end runs of the binary: exit codes and report files.

use serde_json::{json, Value};
use std::path::Path;
use std::process::Command;
use stratocoag::config::desk_scenario;

fn small_scenario() -> Value {
    let mut doc = desk_scenario();
    doc["grid"] = json!({ "x3_nodes": 9, "mass_nodes": 33, "lattice_points": 16 });
    doc
}

fn run(dir: &Path, doc: &Value, args: &[&str]) -> (i32, Value) {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let out = dir.join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_stratocoag"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(&out)
        .args(args)
        .status()
        .unwrap();
    let name = args[0];
    let report = std::fs::read_to_string(out.join(format!("{name}.json"))).unwrap();
    (status.code().unwrap(), serde_json::from_str(&report).unwrap())
}

#[test]
fn check_passes_on_the_desk_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), &desk_scenario(), &["check"]);
    assert_eq!(code, 0);
    let flags = &report["bounds"]["flags"];
    for f in ["contraction", "data_size", "contraction_star", "data_size_star"] {
        assert_eq!(flags[f], json!(true), "{f}");
    }
    assert_eq!(report["config"]["grid"]["horizon"], json!(2.0));
}

#[test]
fn check_fails_with_large_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = small_scenario();
    doc["data"]["sigma0"]["mass"]["height"] = json!(0.5);
    let (code, report) = run(dir.path(), &doc, &["check"]);
    assert_eq!(code, 2);
    assert_eq!(report["status"], json!("fail"));
    assert_eq!(report["bounds"]["flags"]["data_size"], json!(false));
}

#[test]
fn solve_with_zero_inflow_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = small_scenario();
    doc["kernels"]["g0"] = json!({ "kind": "zero" });
    doc["data"]["sigma0"]["mass"] = json!({ "kind": "zero" });
    doc["data"]["sigma1"]["mass"] = json!({ "kind": "zero" });
    let (code, report) = run(dir.path(), &doc, &["solve"]);
    assert_eq!(code, 0);
    assert_eq!(report["field"]["sup"], json!(0.0));
    let csv = std::fs::read_to_string(dir.path().join("out/field.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x3,m,sigma"));
    assert!(lines.all(|l| l.ends_with(",0")));
}

#[test]
fn missing_kernels_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = small_scenario();
    doc.as_object_mut().unwrap().remove("kernels");
    let (code, report) = run(dir.path(), &doc, &["check"]);
    assert_eq!(code, 1);
    assert!(report["error"].as_str().unwrap().contains("kernels: required"));
}

#[test]
fn no_convergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), &small_scenario(), &["solve", "--max-iterations", "2"]);
    assert_eq!(code, 3);
    assert_eq!(report["status"], json!("no_convergence"));
}

#[test]
fn steady_and_relax_with_stationary_data() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), &small_scenario(), &["steady"]);
    assert_eq!(code, 0);
    assert_eq!(report["field"]["within_bound"], json!(true));
    let (code, report) = run(dir.path(), &small_scenario(), &["relax"]);
    assert_eq!(code, 0);
    assert_eq!(report["verdict"], json!(true));
    let csv = std::fs::read_to_string(dir.path().join("out/relax.csv")).unwrap();
    assert!(csv.starts_with("t,distance\n"));
}

#[test]
fn trace_writes_paths_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = run(dir.path(), &small_scenario(), &["trace", "--point", "1.5,0.3,1.2"]);
    assert_eq!(code, 0);
    let path = &report["paths"][0];
    assert_eq!(path["entry"], json!("top_boundary"));
    assert!(path["s_bar_1"].as_f64().unwrap() <= 0.3 + 1e-8);
    let csv = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert!(csv.starts_with("path,direction,s,t,x3,m\n"));
}

#[test]
fn seed_scenario_materializes_the_desk_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("seeded");
    let status = Command::new(env!("CARGO_BIN_EXE_stratocoag"))
        .arg("--seed-scenario")
        .arg("--output")
        .arg(&out)
        .arg("check")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let seeded: Value = serde_json::from_str(&std::fs::read_to_string(out.join("scenario.json")).unwrap()).unwrap();
    assert_eq!(seeded, desk_scenario());
}
