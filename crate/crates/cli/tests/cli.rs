use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dede(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dede"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/v1").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const ONE_BY_ONE: &str = r#"{
  "format": "dede-problem/1",
  "n_resources": 1,
  "n_demands": 1,
  "domain": {"kind": "non_negative"},
  "sense": "maximize",
  "objective": [{"kind": "linear", "target": "global", "entries": [[0, 0, 1.0]]}],
  "resource_constraints": [{"entries": [[0, 0, 1.0]], "rel": "<=", "rhs": 1.0}],
  "demand_constraints": [{"entries": [[0, 0, 1.0]], "rel": "<=", "rhs": 1.0}]
}
"#;

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn trivial_problem_solves_to_one() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "one.json", ONE_BY_ONE);
    let out = dir.path().join("one.sol.json");
    let o = dede(&["solve", s(&input), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sol = read_json(&out);
    assert_eq!(sol["format"], "dede-solution/1");
    assert!((sol["objective_repaired"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert_eq!(sol["termination"], "converged");
    assert!(sol["wall_ms"].is_number());
    assert!(sol["residuals"]["primal"].is_number());
    let triplets = sol["allocation"].as_array().unwrap();
    assert_eq!(triplets.len(), 1);
    assert_eq!(triplets[0][0], 0);
}

#[test]
fn malformed_field_exits_2_with_location() {
    let dir = TempDir::new().unwrap();
    let bad = ONE_BY_ONE.replace(r#""rhs": 1.0}],
  "demand"#, r#""rhs": "one"}],
  "demand"#);
    let input = write(&dir, "bad.json", &bad);
    let o = dede(&["solve", s(&input)]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("line 8"), "{msg}");
    assert!(msg.contains("resource_constraints[0].rhs"), "{msg}");
}

#[test]
fn truncated_json_and_wrong_version_exit_2() {
    let dir = TempDir::new().unwrap();
    let cut = write(&dir, "cut.json", &ONE_BY_ONE[..120]);
    assert_eq!(dede(&["solve", s(&cut)]).status.code(), Some(2));
    let v2 = write(&dir, "v2.json", &ONE_BY_ONE.replace("dede-problem/1", "dede-problem/2"));
    let o = dede(&["solve", s(&v2)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dede-problem/2"));
    assert_eq!(dede(&["solve", "/nonexistent/problem.json"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dede(&["solve"]).status.code(), Some(2));
    assert_eq!(dede(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn oversized_load_balance_exits_3() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("lb.json");
    assert!(dede(&["gen", "-o", s(&input), "load-balance", "--servers", "3", "--shards", "4"]).status.success());
    let mut v = read_json(&input);
    v["case"]["instance"]["memory"] = serde_json::json!([1.0, 1.0, 1.0]);
    std::fs::write(&input, serde_json::to_string(&v).unwrap()).unwrap();
    let o = dede(&["solve", s(&input)]);
    assert_eq!(o.status.code(), Some(3));
    let msg = stderr(&o);
    assert!(msg.contains("footprint 4") && msg.contains("memory 3"), "{msg}");
}

#[test]
fn traffic_fixture_matches_cached_optimum() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("te.sol.json");
    let input = fixture("te_total_flow_3x3_s03.json");
    let o = dede(&["solve", s(&input), "-o", s(&out), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let oracle = read_json(&fixture("te_total_flow_3x3_s03.oracle.json"))["objective"].as_f64().unwrap();
    let engine = read_json(&out)["objective_repaired"].as_f64().unwrap();
    assert!((engine - oracle).abs() / oracle <= 0.01, "{engine} vs {oracle}");
}

#[test]
fn reproducible_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let input = fixture("cluster_maxmin_5x8_s01.json");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for (out, workers) in [(&a, "1"), (&b, "2")] {
        let o = dede(&["solve", s(&input), "-o", s(out), "--reproducible", "--deterministic", "--workers", workers]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    assert!(read_json(&a).get("wall_ms").is_none());
}

#[test]
fn warm_start_from_own_solution_converges_immediately() {
    let dir = TempDir::new().unwrap();
    let input = fixture("te_min_mlu_3x3_s02.json");
    let first = dir.path().join("first.json");
    let second = dir.path().join("second.json");
    assert!(dede(&["solve", s(&input), "-o", s(&first), "--workers", "1"]).status.success());
    let o = dede(&["solve", s(&input), "-o", s(&second), "--workers", "1", "--warm-start", s(&first)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(read_json(&second)["iters"].as_u64().unwrap() <= 2);

    // parameter changes keep the shape; a different shape is rejected before solving
    let scaled = dir.path().join("scaled.json");
    let args = ["gen", "-o", s(&scaled), "perturb", s(&input), "--kind", "rhs-scale", "--amount", "1.05"];
    assert!(dede(&args).status.success());
    let o = dede(&["solve", s(&scaled), "-o", s(&second), "--warm-start", s(&first)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cluster = fixture("cluster_maxmin_5x8_s00.json");
    let o = dede(&["solve", s(&cluster), "--warm-start", s(&first)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("shape"));
}

#[test]
fn trace_has_fixed_header_and_one_row_per_iteration() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "one.json", ONE_BY_ONE);
    let out = dir.path().join("sol.json");
    let trace = dir.path().join("trace.csv");
    assert!(dede(&["solve", s(&input), "-o", s(&out), "--trace", s(&trace)]).status.success());
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,primal_res,dual_res,rho,objective,x_step_ms,z_step_ms"));
    let iters = read_json(&out)["iters"].as_u64().unwrap() as usize;
    assert_eq!(lines.count(), iters);
}

#[test]
fn time_budget_and_iteration_cap_are_respected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sol.json");
    let input = fixture("te_min_mlu_3x3_s00.json");
    let o = dede(&["solve", s(&input), "-o", s(&out), "--max-iters", "3"]);
    assert!(o.status.success());
    let sol = read_json(&out);
    assert_eq!(sol["iters"], 3);
    assert_eq!(sol["termination"], "max_iters");
    let o = dede(&["solve", s(&input), "-o", s(&out), "--time-budget-ms", "0"]);
    assert!(o.status.success());
    assert_eq!(read_json(&out)["termination"], "time_budget");
}

#[test]
fn invalid_engine_options_exit_2() {
    let dir = TempDir::new().unwrap();
    let input = write(&dir, "one.json", ONE_BY_ONE);
    assert_eq!(dede(&["solve", s(&input), "--eps-abs", "0"]).status.code(), Some(2));
    assert_eq!(dede(&["solve", s(&input), "--rho", "-1"]).status.code(), Some(2));
}

const COMPARE_HEADER: &str = "instance,oracle_obj,engine_obj,rel_gap,oracle_ms,engine_ms,iters";

#[test]
fn compare_with_no_instances_is_header_only() {
    let o = dede(&["compare"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), format!("{COMPARE_HEADER}\n"));
}

#[test]
fn compare_reports_gaps_and_unavailable_oracles() {
    let dir = TempDir::new().unwrap();
    let toy = dir.path().join("toy.json");
    let lb = dir.path().join("lb.json");
    assert!(dede(&["gen", "-o", s(&toy), "toy"]).status.success());
    assert!(dede(&["gen", "-o", s(&lb), "load-balance", "--seed", "3"]).status.success());
    let o = dede(&["compare", s(&toy), s(&lb), "--workers", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(text.lines().next(), Some(COMPARE_HEADER));
    assert_eq!(rows[0][0], "toy");
    assert!(rows[0][3].parse::<f64>().unwrap() <= 0.01);
    let (oracle, engine): (f64, f64) = (rows[1][1].parse().unwrap(), rows[1][2].parse().unwrap());
    assert!(engine - oracle <= 1.0, "movement gap {engine} vs {oracle}");

    let o = dede(&["compare", s(&toy), "--oracle-limit", "0"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[1], row[3], row[4]), ("NA", "NA", "NA"));
    assert!(row[2].parse::<f64>().is_ok());
}

#[test]
fn compare_expands_directories() {
    let dir = TempDir::new().unwrap();
    for seed in ["0", "1"] {
        let p = dir.path().join(format!("c{seed}.json"));
        let args = ["gen", "-o", s(&p), "cluster", "--types", "3", "--jobs", "3", "--seed", seed];
        assert!(dede(&args).status.success());
    }
    std::fs::write(dir.path().join("c0.oracle.json"), "{}").unwrap();
    let o = dede(&["compare", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["c0", "c1"]);
}

#[test]
fn bench_sweeps_workers_with_identical_objectives() {
    let input = fixture("cluster_maxmin_5x8_s02.json");
    let o = dede(&["bench", s(&input), "--workers-list", "1,2", "--reps", "2", "--warm-scale", "1.05"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("median wall"));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("mode,workers,rep,wall_ms,iters,objective_raw,objective_repaired,termination")
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 6);
    let sweep: Vec<&Vec<String>> = rows.iter().filter(|r| r[0] == "sweep").collect();
    assert_eq!(sweep.len(), 4);
    assert!(sweep.iter().all(|r| r[6] == sweep[0][6]));
    assert_eq!(rows[4][0], "cold");
    assert_eq!(rows[5][0], "warm");
}

#[test]
fn generated_instances_round_trip_through_perturb() {
    let dir = TempDir::new().unwrap();
    let base = dir.path().join("te.json");
    let next = dir.path().join("te2.json");
    let args = ["gen", "-o", s(&base), "traffic", "--objective", "min-mlu", "--demands", "6", "--seed", "4"];
    assert!(dede(&args).status.success());
    let o = dede(&["gen", "-o", s(&next), "perturb", s(&base), "--kind", "rhs-scale", "--amount", "1.05"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (a, b) = (read_json(&base), read_json(&next));
    assert_eq!(a["n_resources"], b["n_resources"]);
    assert_ne!(a["resource_constraints"], b["resource_constraints"]);

    // files without a generator record cannot be perturbed
    let plain = write(&dir, "one.json", ONE_BY_ONE);
    let o = dede(&["gen", "perturb", s(&plain), "--kind", "rhs-scale", "--amount", "1.1"]);
    assert_eq!(o.status.code(), Some(2));
}
