use std::path::Path;
use std::process::{Command, Output};

fn hsarnn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsarnn")).args(args).current_dir(cwd).output().unwrap()
}

fn summary(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn no_subcommand_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsarnn(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsarnn(&["gen-data", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn module_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--positions", "Q"][..],
        &["train", "--data", "missing"],
        &["eval", "--teacher", "--speed", "0.5"],
    ] {
        let out = hsarnn(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
        assert!(err["error"].is_string(), "{args:?}");
    }
}

#[test]
fn gen_data_is_reproducible_with_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = hsarnn(&["gen-data", "--seed", "9", "--steps", "200", "--data", name], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(summary(&out)["files"].as_array().unwrap().len(), 3);
    }
    for p in ["A", "C", "E"] {
        let file = format!("{p}_9.hsep");
        let a = std::fs::read(dir.path().join("a").join(&file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn teacher_eval_reports_every_position() {
    let dir = tempfile::tempdir().unwrap();
    let out = hsarnn(&["eval", "--teacher", "--speed", "1", "--trials", "2", "--jitter", "0"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    for p in ["A", "B", "C", "D", "E"] {
        assert_eq!(s["results"][p]["successes"], 2, "{s}");
    }
}
