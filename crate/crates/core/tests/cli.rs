use std::path::Path;
use std::process::{Command, Output};

fn polex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polex"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SMALL: &str = r#"{"env": {"name": "gridnav"}, "extract": {"iterations": 4}, "eval": {"sessions": 2}}"#;

#[test]
fn extract_writes_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    let out = polex(&["extract", "--config", "c.json", "--out", "run", "--quiet"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = tmp.path().join("run");
    for f in [
        "config_echo.json",
        "teacher.json",
        "student.json",
        "metrics.csv",
        "metrics.json",
        "rules.txt",
        "extraction.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join("INCOMPLETE").exists());
    assert!(out.stdout.is_empty());
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", SMALL);
    let out = polex(
        &[
            "extract", "--config", "c.json", "--out", "r", "--seed", "42", "--method", "viper",
            "--student", "knn",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("r/metrics.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("seed=42"));
    assert!(csv.contains("\nviper,gridnav,42,1,"));
    let rules = std::fs::read_to_string(tmp.path().join("r/rules.txt")).unwrap();
    assert!(rules.contains("knn students have no rule form"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "typo.json", r#"{"env": {"name": "gridnav"}, "extract": {"etaa": 1}}"#);
    write(tmp.path(), "neg.json", r#"{"env": {"name": "gridnav"}, "extract": {"eta": -1}}"#);
    for (file, needle) in [
        ("typo.json", "did you mean `eta`"),
        ("neg.json", "eta must be"),
        ("absent.json", "cannot read"),
    ] {
        let out = polex(&["extract", "--config", file], tmp.path());
        assert_eq!(out.status.code(), Some(2), "{file}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{file}: {err}");
    }
    let out = polex(&["extract", "--config", "typo.json", "--method", "bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "c.json",
        r#"{"env": {"name": "gridnav"}, "teacher_checkpoint": "missing/teacher.json"}"#,
    );
    let out = polex(&["extract", "--config", "c.json", "--out", "r"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    let marker = std::fs::read_to_string(tmp.path().join("r/INCOMPLETE")).unwrap();
    assert!(marker.starts_with("run failed"), "{marker}");
}

#[test]
fn teacher_evaluate_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "c.json", SMALL);
    write(dir, "p.json", r#"{"env": {"name": "pursuit2v1"}, "teacher": {"training_episodes": 1000}, "extract": {"iterations": 2, "sample_budget": null}, "eval": {"sessions": 1}}"#);

    let out = polex(&["train-teacher", "--config", "c.json", "--out", "t"], dir);
    assert!(out.status.success());
    let report = std::fs::read_to_string(dir.join("t/teacher_report.json")).unwrap();
    assert!(report.contains("\"oracle_agreement\""));
    assert!(String::from_utf8_lossy(&out.stdout).contains("win rate"));

    // A teacher checkpoint feeds a later run.
    let t = dir.join("t/teacher.json").display().to_string();
    write(
        dir,
        "ck.json",
        &format!(r#"{{"env": {{"name": "gridnav"}}, "teacher_checkpoint": {t:?}, "extract": {{"iterations": 4}}, "eval": {{"sessions": 2}}}}"#),
    );
    assert!(polex(&["extract", "--config", "ck.json", "--out", "a", "--quiet"], dir).status.success());
    assert!(polex(&["extract", "--config", "c.json", "--out", "b", "--method", "dagger", "--quiet"], dir)
        .status
        .success());

    let out = polex(&["evaluate", "--config", "a/config_echo.json"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"consistency\""));
    assert!(dir.join("a/evaluation.json").exists());

    let out = polex(&["compare", "a", "b", "--out", "cmp"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("cmp/comparison.csv").exists());
    assert!(dir.join("cmp/summary.md").exists());

    assert!(polex(&["extract", "--config", "p.json", "--out", "p", "--quiet"], dir).status.success());
    let out = polex(&["compare", "a", "p", "--out", "mixed"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mixed environments"));
}

#[test]
fn sweep_runs_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "s.json",
        r#"{"env": {"name": "gridnav"}, "extract": {"iterations": 3}, "eval": {"sessions": 2},
            "sweep": {"eta": [0.0, 0.5], "student_kind": ["tree", "linear"]}}"#,
    );
    let out = polex(&["sweep", "--config", "s.json", "--out", "sw"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sw = tmp.path().join("sw");
    for name in [
        "fipe-tree-eta0-m10",
        "fipe-tree-eta0.5-m10",
        "fipe-linear-eta0-m10",
        "fipe-linear-eta0.5-m10",
    ] {
        assert!(sw.join(name).join("metrics.csv").exists(), "{name}");
    }
    let csv = std::fs::read_to_string(sw.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("summary,")).count(), 4);
    let md = std::fs::read_to_string(sw.join("summary.md")).unwrap();
    assert!(md.contains("## Student structures"));
}
