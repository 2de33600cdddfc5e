use std::path::Path;
use std::process::{Command, Output};

fn chartsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chartsynth"))
        .args(args)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn fixture(dir: &Path) -> String {
    let out = dir.join("fx");
    let o = chartsynth(&["fixture", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out.join("manifest.json").display().to_string()
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let o = chartsynth(&["--frobnicate", "run", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("Usage:"));
}

#[test]
fn malformed_manifest_reports_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(
        &path,
        "{\n  \"seed\": 1,\n  \"stages\": [{\"stage\": \"score\", \"bogus\": true}]\n}",
    )
    .unwrap();
    let o = chartsynth(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = text(&o.stderr);
    assert!(err.contains("stages[0]"), "{err}");
    assert!(err.contains("bogus"), "{err}");
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, r#"{"stages": []}"#).unwrap();
    let o = chartsynth(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("seed"));
}

#[test]
fn dry_run_prints_plan_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let o = chartsynth(&["--dry-run", "run", &manifest]);
    assert_eq!(o.status.code(), Some(0));
    let plan = text(&o.stdout);
    for stage in ["score", "self_enhance", "bucket", "diagnose"] {
        assert!(plan.contains(stage), "{plan}");
    }
    assert!(!dir.path().join("fx/out").exists());
}

#[test]
fn stage_before_its_input_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let o = chartsynth(&["synth", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("run"), "{}", text(&o.stderr));
}

#[test]
fn stages_run_one_at_a_time_match_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let steps: &[&[&str]] = &[
        &["score"],
        &["filter-hard"],
        &["cold-start"],
        &["export-coder-set"],
        &["coder-sample", "--iteration", "1"],
        &["boost", "--iteration", "1"],
        &["coder-sample", "--iteration", "2"],
        &["boost", "--iteration", "2"],
        &["synth"],
        &["qa-synth"],
        &["cot-distill"],
        &["cot-filter"],
        &["bucket"],
        &["diagnose"],
    ];
    for step in steps {
        let mut args = step.to_vec();
        args.extend(["--manifest", &manifest]);
        let o = chartsynth(&args);
        assert_eq!(o.status.code(), Some(0), "{step:?}: {}", text(&o.stderr));
    }
    let stepwise = std::fs::read(dir.path().join("fx/out/bucket/sft.jsonl")).unwrap();

    let other = tempfile::tempdir().unwrap();
    let full = fixture(other.path());
    assert_eq!(chartsynth(&["run", &full]).status.code(), Some(0));
    assert_eq!(
        stepwise,
        std::fs::read(other.path().join("fx/out/bucket/sft.jsonl")).unwrap()
    );

    let o = chartsynth(&["boost", "--iteration", "3", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn standalone_cot_filter_writes_passed_rejected_and_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let long: Vec<String> = (0..120).map(|i| format!("w{i}")).collect();
    let good = format!("<think>{}</think><answer>3</answer>", long.join(" "));
    let lines = [
        serde_json::json!({"id": 1, "text": good}),
        serde_json::json!({"id": 2, "raw_text": "<think>too short</think><answer>3</answer>"}),
        serde_json::json!({"id": 3, "cot_trace": "no tags at all"}),
    ];
    let input = dir.path().join("traces.jsonl");
    std::fs::write(
        &input,
        lines.iter().map(|l| format!("{l}\n")).collect::<String>(),
    )
    .unwrap();
    let out = dir.path().join("filtered");
    let o = chartsynth(&[
        "cot-filter",
        "--input",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o.stderr));
    let passed = std::fs::read_to_string(out.join("passed.jsonl")).unwrap();
    assert_eq!(passed.lines().count(), 1);
    assert!(passed.contains("\"id\":1"));
    assert_eq!(
        std::fs::read_to_string(out.join("rejected.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    let hist: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("histogram.json")).unwrap())
            .unwrap();
    assert_eq!(hist["length"], 2);
    assert_eq!(hist["template"], 1);
}

#[test]
fn stub_worker_subcommand_speaks_the_protocol() {
    use std::io::Write;
    let mut child = Command::new(env!("CARGO_BIN_EXE_chartsynth"))
        .arg("stub-worker")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    writeln!(
        child.stdin.take().unwrap(),
        r##"{{"task_id":"t1","kind":"script","code":"#stub: print 7","timeout_s":5}}"##
    )
    .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let reply: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
    assert_eq!(reply["task_id"], "t1");
    assert_eq!(reply["status"], "ok");
    assert_eq!(reply["stdout"], "7\n");
}
