use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn qnum(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnum")).args(args).env_remove("QPD_OUT_DIR").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let f = dir.join(name);
    std::fs::write(&f, text).unwrap();
    f
}

const SHORT: &str = r#"
[topology]
kind = "dumbbell"
link_length_km = 80.0

[sessions]
preset = "dumbbell"

[run]
duration_s = 20.0
seeds = [1, 2]
"#;

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SHORT);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = qnum(&["run", p(&sc), "--out", p(dir), "--seed", "7"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(files.iter().any(|f| f == "summary.csv"));
    for f in files {
        assert_eq!(std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap(), "{f:?}");
    }
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.contains("status,ok"));
    assert!(summary.contains("seed,7"));
}

#[test]
fn unknown_link_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = format!("{SHORT}\n[[interventions]]\ntime_s = 5.0\nkind = \"link_failure\"\nlink = 42\n");
    let sc = write(tmp.path(), "bad.toml", &bad);
    let out_dir = tmp.path().join("out");
    let out = qnum(&["run", p(&sc), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("42"));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.contains("status,invalid"));
    assert_eq!(qnum(&["validate", p(&sc)]).status.code(), Some(2));
}

#[test]
fn unknown_field_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "typo.toml", &SHORT.replace("preset", "presett"));
    assert_eq!(qnum(&["validate", p(&sc)]).status.code(), Some(2));
}

#[test]
fn require_convergence_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    // The bottleneck fails near the end, so the aggregate leaves its band.
    let text = format!("{SHORT}\n[[interventions]]\ntime_s = 17.0\nkind = \"link_failure\"\nlink = 3\n");
    let sc = write(tmp.path(), "s.toml", &text);
    let out_dir = tmp.path().join("out");
    let out = qnum(&["run", p(&sc), "--out", p(&out_dir), "--require-convergence"]);
    assert_eq!(out.status.code(), Some(4));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.contains("status,did_not_converge"));
}

#[test]
fn sweep_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = write(tmp.path(), "s.toml", SHORT);
    let out_dir = tmp.path().join("sweep");
    let out = qnum(&["sweep", p(&sc), "--out", p(&out_dir), "--axis", "T_outer", "--values", "1,10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    let runs = std::fs::read_to_string(out_dir.join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert!(out_dir.join("summary.csv").exists());
    let bad = qnum(&["sweep", p(&sc), "--out", p(&out_dir), "--axis", "colour", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn upper_bound_and_oracle_commands() {
    let out = qnum(&["upper-bound", p(&scenarios().join("dumbbell_skr.toml"))]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let agg: f64 = text.lines().find_map(|l| l.strip_prefix("aggregate_skr,")).unwrap().parse().unwrap();
    assert!((agg - 160.676).abs() < 0.05, "{agg}");

    let tmp = tempfile::tempdir().unwrap();
    let single = write(
        tmp.path(),
        "single.toml",
        r#"
[topology]
kind = "explicit"
nodes = 2
links = [{ a = 0, b = 1, length_km = 80.0 }]

[sessions]
preset = "explicit"
utility = "neg"
list = [{ src = 0, dst = 1 }]
"#,
    );
    let out_dir = tmp.path().join("oracle");
    let out = qnum(&["oracle-compare", p(&single), "--out", p(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("within_tolerance,true"));
}

#[test]
fn stability_check_rejects_nonconcave_utilities() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qnum(&["stability-check", p(&scenarios().join("dumbbell_skr.toml")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(tmp.path().join("summary.csv").exists());
}
