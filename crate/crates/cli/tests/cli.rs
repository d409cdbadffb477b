use std::path::Path;
use std::process::{Command, Output};

fn saef(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saef")).args(args).current_dir(dir).output().expect("spawn saef")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = saef(dir, args);
    assert!(out.status.success(), "saef {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Generates, trains and builds a small bundle; returns the built bundle name.
fn prepared(dir: &Path) -> &'static str {
    ok(
        dir,
        &["generate", "--out", "w.json", "--seed", "3", "--set", "tasks=4", "--set", "classes_per_task=3", "--set", "d=16", "--set", "r=4", "--set", "epochs=10"],
    );
    ok(dir, &["train", "w.json", "--out", "t.json"]);
    ok(dir, &["build", "t.json", "--out", "b.json"]);
    "b.json"
}

fn field(summary: &str, key: &str) -> f64 {
    summary
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {summary}"))
        .parse()
        .unwrap()
}

#[test]
fn flat_baseline_queries_every_expert() {
    let dir = tempfile::tempdir().unwrap();
    let b = prepared(dir.path());
    let line = ok(dir.path(), &["baseline-flat", b]);
    assert_eq!(field(&line, "EVALS"), 4.0);
    assert_eq!(field(&line, "SPEEDUP"), 1.0);
}

#[test]
fn huge_threshold_stops_at_roots() {
    let dir = tempfile::tempdir().unwrap();
    let b = prepared(dir.path());
    let line = ok(dir.path(), &["evaluate", b, "--tau-e", "100"]);
    assert_eq!(field(&line, "DEPTH"), 1.0);
}

#[test]
fn train_reports_each_task_and_build_reports_forest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--out", "w.json", "--set", "tasks=3", "--set", "classes_per_task=2", "--set", "d=8", "--set", "r=2", "--set", "epochs=3"]);
    let log = ok(dir.path(), &["train", "w.json", "--out", "t.json", "--log-csv", "log.csv"]);
    assert_eq!(log.lines().filter(|l| l.starts_with("task ")).count(), 3);
    let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    let built = ok(dir.path(), &["build", "t.json", "--out", "b.json"]);
    assert!(built.starts_with("K*="), "{built}");
    assert!(built.contains("tree_heights="), "{built}");
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let b = prepared(dir.path());
    let out = ok(dir.path(), &["sweep", b, "--param", "tau", "--values", "0.1,1,10"]);
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), "run_id,method,K,tau,tau_e,abar,a_t,mean_depth,theo_speedup,mean_evals");
    assert_eq!(lines.count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(saef(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(saef(d, &["generate", "--out", "x.json", "--set", "tasks=0"]).status.code(), Some(2));
    assert_eq!(saef(d, &["generate", "--out", "x.json", "--set", "nonsense"]).status.code(), Some(2));
    assert_eq!(saef(d, &["evaluate", "missing.json"]).status.code(), Some(1));

    ok(d, &["generate", "--out", "w.json", "--set", "tasks=3", "--set", "classes_per_task=2", "--set", "d=8", "--set", "r=2", "--set", "epochs=2"]);
    // Untrained bundle: nothing to build or evaluate.
    assert_eq!(saef(d, &["build", "w.json", "--out", "b.json"]).status.code(), Some(1));
    ok(d, &["train", "w.json", "--out", "t.json"]);
    assert_eq!(saef(d, &["evaluate", "t.json"]).status.code(), Some(1));
    assert_eq!(saef(d, &["train", "w.json", "--out", "t2.json", "--set", "tasks=5"]).status.code(), Some(2));
    assert_eq!(saef(d, &["sweep", "t.json", "--param", "k", "--values", "9"]).status.code(), Some(2));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "tasks = 3\nclasses_per_task = 2\nd = 8\nr = 2\nepochs = 2\nseed = 5\n").unwrap();
    ok(d, &["generate", "--config", "run.cfg", "--seed", "6", "--out", "w.json"]);
    let text = std::fs::read_to_string(d.join("w.json")).unwrap();
    assert!(text.contains("\"seed\": 6"), "flag should override file");
    assert!(text.contains("\"tasks\": 3"));
}
