use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgesched")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn desktop_profile(dir: &Path) -> String {
    let path = dir.join("profile.jsonl");
    let out = cli(&["profile", "synth", "--preset", "desktop", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    path.to_str().unwrap().to_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

const MIXED: &str = r#"{"requests":[
{"id":1,"model":"rn152","shape":[3,224,224],"period_us":1000,"deadline_us":20000,"num_frames":50,"first_release_us":0,"real_time":true},
{"id":2,"model":"rn152","shape":[3,224,224],"period_us":100000,"deadline_us":8000,"num_frames":5,"first_release_us":0,"real_time":true},
{"id":3,"model":"rn50","shape":[3,224,224],"period_us":100000,"deadline_us":100000,"num_frames":5,"first_release_us":0,"real_time":true}]}"#;

#[test]
fn admit_reports_each_phase() {
    let dir = TempDir::new().unwrap();
    let profile = desktop_profile(dir.path());
    let trace = write(dir.path(), "trace.json", MIXED);
    let out = cli(&["admit", "--profile", &profile, "--trace", &trace]);
    assert!(out.status.success());
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    // 10 frames per 10 ms window of rn152 cost 36 ms
    assert_eq!(&rows[0][..4], ["1", "rejected", "1", "3.600000"]);
    // one frame waits a 4 ms window, then runs 9 ms against an 8 ms deadline
    assert_eq!(&rows[1][..3], ["2", "rejected", "2"]);
    assert!(rows[1][5].contains("13000"));
    assert_eq!(&rows[2][..3], ["3", "admitted", "-"]);
}

#[test]
fn sedf_admission_skips_utilization_test() {
    let dir = TempDir::new().unwrap();
    let profile = desktop_profile(dir.path());
    let trace = write(dir.path(), "trace.json", MIXED);
    let out = cli(&["admit", "--profile", &profile, "--trace", &trace, "--policy", "sedf"]);
    assert!(out.status.success());
    assert!(stdout(&out).lines().skip(1).all(|l| !l.contains(",1,")));
}

#[test]
fn empty_trace_runs_cleanly() {
    let dir = TempDir::new().unwrap();
    let profile = desktop_profile(dir.path());
    let trace = write(dir.path(), "empty.json", r#"{"requests":[]}"#);
    let out = cli(&["admit", "--profile", &profile, "--trace", &trace]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).lines().count(), 1);
    let run_dir = dir.path().join("run");
    let out = cli(&["run", "--profile", &profile, "--trace", &trace, "--out", run_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["admitted"], 0);
    assert_eq!(summary["miss_rate"], 0.0);
}

#[test]
fn duplicate_profile_rows_are_rejected() {
    let row = ["--model", "a", "--shape", "3x8x8", "--base-us", "1", "--per-frame-us", "1", "--max-batch", "2"];
    let args: Vec<&str> = ["profile", "synth"].iter().chain(&row).chain(&row).copied().collect();
    let out = cli(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_input_fails() {
    let out = cli(&["admit", "--profile", "/nonexistent/p.jsonl", "--trace", "/nonexistent/t.json"]);
    assert!(!out.status.success());
    assert!(!cli(&["run", "--policy", "bogus", "--profile", "x", "--trace", "y"]).status.success());
}

#[test]
fn profile_round_trips_through_validate() {
    let dir = TempDir::new().unwrap();
    let profile = desktop_profile(dir.path());
    assert!(cli(&["profile", "validate", &profile]).status.success());
    let bad = write(dir.path(), "bad.jsonl", "{\"model\":\"m\"}\n");
    assert!(!cli(&["profile", "validate", &bad]).status.success());
}

#[test]
fn generated_traces_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let gen = |name: &str| {
        let path = dir.path().join(name);
        let out = cli(&["trace", "gen", "--seed", "9", "--requests", "5", "--out", path.to_str().unwrap()]);
        assert!(out.status.success());
        std::fs::read(path).unwrap()
    };
    assert_eq!(gen("a.json"), gen("b.json"));
}

#[test]
fn compare_writes_one_row_per_policy() {
    let dir = TempDir::new().unwrap();
    let profile = desktop_profile(dir.path());
    let trace = dir.path().join("t.json");
    assert!(cli(&["trace", "gen", "--seed", "4", "--requests", "6", "--frames", "40", "--out", trace.to_str().unwrap()])
        .status
        .success());
    let out_dir = dir.path().join("cmp");
    let out = cli(&[
        "compare",
        "--profile",
        &profile,
        "--trace",
        trace.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let names: Vec<&str> = summary.iter().map(|s| s["policy"].as_str().unwrap()).collect();
    assert_eq!(names, ["aimd", "batch", "batch-delay", "deeprt"]);
    let admitted = summary[3]["admitted"].clone();
    assert!(summary.iter().all(|s| s["admitted"] == admitted));
}
