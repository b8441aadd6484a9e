use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus").join(format!("{name}.json"))
}

fn relaxgap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relaxgap")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> (Value, Vec<u8>) {
    let out = relaxgap(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    (serde_json::from_slice(&out.stdout).expect("stdout is JSON"), out.stdout)
}

fn assert_valid(schema: &str, value: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{schema}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).expect("schema compiles");
    let msgs: Vec<String> = match compiled.validate(value) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "{msgs:#?}");
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_relaxed_on_example1() {
    let p = corpus("example1");
    let (v, _) = ok_json(&["solve-relaxed", path_str(&p)]);
    assert_valid("solve-relaxed", &v);
    assert!(v["objective"].as_f64().unwrap().abs() <= 0.05);

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("mu.csv");
    let out = dir.path().join("report.json");
    let status = relaxgap(&[
        "solve-relaxed",
        path_str(&p),
        "--nt",
        "10",
        "--nx",
        "20",
        "--nu",
        "11",
        "--degree",
        "3",
        "--measure-csv",
        path_str(&csv),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(status.status.code(), Some(0));
    assert!(status.stdout.is_empty());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t_center,x1_center,u1_center,weight\n"));
    let mass: f64 = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-9);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_valid("solve-relaxed", &report);
}

#[test]
fn solve_classical_is_reproducible() {
    let p = corpus("terminal_linear");
    let args = ["solve-classical", path_str(&p), "--k", "4", "--starts", "2", "--seed", "9"];
    let (v, first) = ok_json(&args);
    assert_valid("solve-classical", &v);
    assert!((v["best_cost"].as_f64().unwrap() + 1.0).abs() < 1e-6);
    let (_, second) = ok_json(&args);
    assert_eq!(first, second);
}

#[test]
fn thread_cap_does_not_change_results() {
    let p = corpus("convex_steer");
    let args = ["solve-classical", path_str(&p), "--k", "3", "--starts", "3"];
    let (_, default) = ok_json(&args);
    let out = Command::new(env!("CARGO_BIN_EXE_relaxgap")).args(args).env("RELAXGAP_THREADS", "1").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(out.stdout, default);
    let bad = Command::new(env!("CARGO_BIN_EXE_relaxgap")).args(args).env("RELAXGAP_THREADS", "zero").output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn chatter_reports_error() {
    let dir = tempfile::tempdir().unwrap();
    let ym = dir.path().join("ym.json");
    std::fs::write(&ym, r#"{"time_grid": [0, 1], "atoms": [[1], [-1]], "weights": [[0.5, 0.5]]}"#).unwrap();
    let p = corpus("example1");
    let (v, _) = ok_json(&["chatter", path_str(&p), "--young", path_str(&ym), "--n", "10"]);
    assert_valid("chatter", &v);
    assert_eq!(v["control"]["values"].as_array().unwrap().len(), 20);
    assert!(v["error"]["state_err"].as_f64().unwrap() <= 0.05 + 1e-12);

    std::fs::write(&ym, r#"{"time_grid": [0, 1], "atoms": [[1], [-1]], "weights": [[0.5, 0.6]]}"#).unwrap();
    assert_eq!(relaxgap(&["chatter", path_str(&p), "--young", path_str(&ym)]).status.code(), Some(2));
}

#[test]
fn check_finds_the_nonconvex_lagrangian() {
    let p = corpus("example1");
    let (v, _) = ok_json(&["check", path_str(&p), "--which", "v4", "--seed", "0"]);
    assert_valid("check", &v);
    assert_eq!(v[0]["condition"], "V4");
    assert_eq!(v[0]["verdict"], "violated");
    assert!(!v[0]["witnesses"].as_array().unwrap().is_empty());

    let disk = corpus("tangential_disk");
    let (v, first) = ok_json(&["check", path_str(&disk), "--which", "fw1,fw2,h1,ipc,v4", "--seed", "3"]);
    assert_valid("check", &v);
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|r| r["condition"].as_str().unwrap()).collect();
    assert_eq!(ids, ["FW1", "FW2", "H1", "H2", "V4"]);
    assert_eq!(v[3]["verdict"], "violated");
    let (_, second) = ok_json(&["check", path_str(&disk), "--which", "fw1,fw2,h1,ipc,v4", "--seed", "3"]);
    assert_eq!(first, second);
    assert_eq!(relaxgap(&["check", path_str(&p), "--which", "v9"]).status.code(), Some(2));
}

#[test]
fn gap_bound_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("gap.csv");
    let p = corpus("terminal_linear");
    let args = [
        "gap-bound",
        path_str(&p),
        "--ladder",
        "0.4,0.2",
        "--nt",
        "8",
        "--nx",
        "16",
        "--nu",
        "5",
        "--degree",
        "2",
        "--k",
        "4",
        "--starts",
        "1",
        "--csv",
        path_str(&csv),
    ];
    let (v, _) = ok_json(&args);
    assert_valid("gap-bound", &v);
    assert_eq!(v["per_eps"].as_array().unwrap().len(), 2);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("epsilon,upper_shrunk,lower_full,gap_bound"));
    assert_eq!(relaxgap(&["gap-bound", path_str(&p), "--ladder", "0.1,0.2"]).status.code(), Some(2));
}

#[test]
fn residual_of_classical_and_young_controls() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    std::fs::write(&c, r#"{"time_grid": [0, 1], "values": [[-1]]}"#).unwrap();
    let p = corpus("terminal_linear");
    let (v, _) = ok_json(&["residual", path_str(&p), "--control", path_str(&c)]);
    assert_valid("residual", &v);
    assert!(v["residual"].as_f64().unwrap() < 0.3);
    assert!((v["cost"].as_f64().unwrap() + 1.0).abs() < 1e-9);

    let y = dir.path().join("y.json");
    std::fs::write(&y, r#"{"time_grid": [0, 1], "atoms": [[1], [-1]], "weights": [[0.5, 0.5]]}"#).unwrap();
    let (v, _) = ok_json(&["residual", path_str(&corpus("example1")), "--control", path_str(&y), "--nx", "41", "--degree", "3"]);
    assert_valid("residual", &v);
    assert!(v["residual"].as_f64().unwrap() < 1e-3);
}

#[test]
fn export_lp_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lp.txt");
    let p = corpus("zero");
    let status = relaxgap(&["export-lp", path_str(&p), "--out", path_str(&out), "--nt", "4", "--nx", "6", "--nu", "3"]);
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lp = relaxgap::occmeas::read_triplets(&text).unwrap();
    assert_eq!(lp.cols, 4 * 6 * 3 + 6);
    assert_eq!(relaxgap::occmeas::write_triplets(&lp), text);
}

#[test]
fn input_errors_exit_with_2() {
    let missing = relaxgap(&["solve-relaxed", "/nonexistent/problem.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/problem.json"));
    let unknown = relaxgap(&["solve-relaxed", path_str(&corpus("zero")), "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    assert_eq!(relaxgap(&[]).status.code(), Some(2));
    assert_eq!(relaxgap(&["solve-relaxed", path_str(&corpus("zero")), "--nt", "1"]).status.code(), Some(2));
}

#[test]
fn solver_failures_exit_with_3() {
    // x0 = 0 with |u| <= 1 cannot reach [1.5, 2] by T = 1.
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.json");
    std::fs::write(
        &p,
        r#"{"name": "unreachable", "n": 1, "m": 1, "T": 1, "x0": [0], "f": ["u1"], "lagrangian": "0",
            "terminal_cost": "0",
            "omega": {"kind": "box", "lower": [-2], "upper": [2], "bounding_box": {"lower": [-2], "upper": [2]}},
            "target": {"kind": "box", "lower": [1.5], "upper": [2], "bounding_box": {"lower": [1.5], "upper": [2]}},
            "controls": {"lower": [-1], "upper": [1]}}"#,
    )
    .unwrap();
    let out = relaxgap(&["solve-relaxed", path_str(&p), "--nt", "10", "--nx", "20", "--nu", "5", "--degree", "2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
