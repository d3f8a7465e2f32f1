use std::fs;
use std::process::{Command, Output};

fn ragsched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ragsched"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("error is json")
}

const SMALL: &[&str] = &["--config", "case2.1m", "--max-batch", "16"];

#[test]
fn search_writes_frontier_report_and_best() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_str().unwrap();
    let mut args = vec!["search"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--output", path]);
    stdout(&ragsched(&args));

    let csv = fs::read_to_string(dir.path().join("frontier.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "schedule_id,ttft_ms,tpot_ms,qps,qps_per_chip,n_xpus,n_cpu_servers,placement,alloc,batches,burst"
    );
    assert!(lines.count() >= 1);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "search");
    assert!(report["evaluated"].as_u64().unwrap() > 0);

    // the best-throughput schedule re-evaluates to the last frontier row
    let best = dir.path().join("frontier_best.json");
    let eval = stdout(&ragsched(&["eval", "--schedule", best.to_str().unwrap()]));
    let last = csv.lines().last().unwrap();
    let strip_id = |l: &str| l.split_once(',').unwrap().1.to_string();
    assert_eq!(strip_id(eval.lines().nth(1).unwrap()), strip_id(last));
}

#[test]
fn search_is_deterministic_and_csv_round_trips() {
    let mut args = vec!["search"];
    args.extend_from_slice(SMALL);
    let a = stdout(&ragsched(&args));
    let b = stdout(&ragsched(&args));
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("f.csv");
    fs::write(&file, &a).unwrap();
    let again = stdout(&ragsched(&["eval", "--csv", file.to_str().unwrap(), "--config", "case2.1m"]));
    assert_eq!(again, a);

    let one = stdout(&ragsched(&["eval", "--csv", file.to_str().unwrap(), "--config", "case2.1m", "--row", "0"]));
    assert_eq!(one.lines().count(), 2);
    assert_eq!(one.lines().nth(1), a.lines().nth(1));
}

#[test]
fn json_format_lists_rows() {
    let mut args = vec!["baseline"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--format", "json"]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&ragsched(&args))).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows[0]["perf"]["qps_per_chip"].as_f64().unwrap() > 0.0);
}

#[test]
fn sweep_over_query_vectors_loses_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ragsched(&[
        "sweep",
        "--config",
        "case1.8b",
        "--max-batch",
        "16",
        "--key",
        "workload.queries_per_retrieval",
        "--values",
        "1,4",
        "--output",
        dir.path().to_str().unwrap(),
    ]));
    let rows: Vec<Vec<f64>> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1][3] <= rows[0][3], "{out}");
    assert!(dir.path().join("frontier_workload.queries_per_retrieval=4.csv").exists());
}

#[test]
fn zero_latency_simulation_rows() {
    let out = stdout(&ragsched(&[
        "simulate-iterative",
        "--zero-latency",
        "--decode-batch",
        "32",
        "--retrieval-batch",
        "1,32",
        "--retrievals",
        "4",
        "--trials",
        "50",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    let norm = |l: &str| l.split(',').nth(4).unwrap().parse::<f64>().unwrap();
    assert_eq!(norm(lines[1]), 1.0);
    assert!(norm(lines[2]) > 1.5);
}

#[test]
fn simulation_with_config_latencies() {
    let out = stdout(&ragsched(&[
        "simulate-iterative",
        "--config",
        "case3.2retr",
        "--decode-batch",
        "16",
        "--retrieval-batch",
        "4",
        "--retrievals",
        "2",
        "--trials",
        "20",
    ]));
    let row = out.lines().nth(1).unwrap();
    let tpot: f64 = row.split(',').last().unwrap().parse().unwrap();
    assert!(tpot > 0.0);
}

#[test]
fn list_and_show_cases() {
    let out = stdout(&ragsched(&["list-cases"]));
    assert_eq!(out.lines().count(), 11);
    assert!(out.lines().any(|l| l.starts_with("case4")));
    let toml = stdout(&ragsched(&["list-cases", "--show", "case1.8b"]));
    assert!(toml.contains("[hardware]"));
}

#[test]
fn unknown_config_is_bad_input() {
    let out = ragsched(&["search", "--config", "case9"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"], "UnknownSpec");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn impossible_tpot_is_infeasible() {
    let mut args = vec!["search"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--max-tpot", "0.0001"]);
    let out = ragsched(&args);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"], "EmptySpace");
}

#[test]
fn bad_objective_is_rejected() {
    let out = ragsched(&["search", "--config", "case1.8b", "--objective", "ttft"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "InvalidValue");
}

#[test]
fn eval_needs_an_input() {
    let out = ragsched(&["eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "MissingField");
}
