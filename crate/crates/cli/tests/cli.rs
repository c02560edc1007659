use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn psim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psim")).args(args).output().expect("run psim")
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const HEADER: &str = "job_id,submit_time_s,duration_s,required_servers,num_workers,model_profile_id\n";

#[test]
fn empty_trace_gives_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, HEADER).unwrap();
    let out = dir.path().join("out");
    let o = psim(&["simulate", "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["events.jsonl", "intervals.csv", "jobs.csv", "summary.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("jobs_started,0"));
    assert_eq!(fs::read_to_string(out.join("jobs.csv")).unwrap().lines().count(), 1);
}

#[test]
fn unknown_profile_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, format!("{HEADER}a,0,60,1,2,alexnet-1s\nb,5,60,1,2,nosuch\n")).unwrap();
    let o = psim(&["simulate", "--trace", trace.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trace.csv:3"), "{err}");
    assert!(err.contains("nosuch"), "{err}");
}

#[test]
fn malformed_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, HEADER).unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "loss_limt = 0.2\n").unwrap();
    let o = psim(&["simulate", "--trace", trace.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn pack_four_long_jobs() {
    let o = psim(&["pack", "long-2s*4"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("Aggregators: 2"), "{s}");
    assert!(s.contains("CPU reduction ratio: 0.7500"), "{s}");
}

#[test]
fn pack_two_wide_jobs() {
    let o = psim(&["pack", "--profiles", &data("profiles.json"), "long-4s*2"]);
    assert!(stdout(&o).contains("CPU reduction ratio: 0.5000"));
}

#[test]
fn pack_one_job_has_no_loss() {
    let s = stdout(&psim(&["pack", "bert-2s"]));
    assert!(s.contains("loss bert-2s#0: 0.0000"), "{s}");
}

#[test]
fn oracle_compare_has_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let o = psim(&["oracle-compare", "--count", "200", "--seed", "5", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("constraint violations: 0"));
    let rows = fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    assert_eq!(rows.lines().count(), 201);
}

#[test]
fn simulate_is_deterministic_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t");
    let g = psim(&["gen-trace", "--jobs", "20", "--seed", "3", "--out", trace.to_str().unwrap()]);
    assert!(g.status.success());
    let csv = trace.join("trace.csv");
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["simulate", "--trace", csv.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        assert!(psim(&args).status.success());
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    assert_eq!(fs::read(a.join("events.jsonl")).unwrap(), fs::read(b.join("events.jsonl")).unwrap());
    let s = run("s", &["--sweep", "2", "--seed", "10", "--interval-s", "30"]);
    assert!(s.join("seed-10/summary.csv").exists());
    assert!(s.join("seed-11/summary.csv").exists());
    assert_eq!(fs::read_to_string(s.join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn packing_scenario_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    assert!(psim(&["scenario", "packing", "--out", dir.path().to_str().unwrap()]).status.success());
    let rows = fs::read_to_string(dir.path().join("packing.csv")).unwrap();
    assert!(rows.contains("4,2,2,0.750000"), "{rows}");
}
