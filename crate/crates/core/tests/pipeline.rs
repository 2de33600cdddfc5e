use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chartsynth::gateway::{MockBackend, MockScript};
use chartsynth::pipeline::fixture::{write_fixture, CHARTS};
use chartsynth::pipeline::jsonl::read_jsonl;
use chartsynth::pipeline::{validate_dataset, Manifest, PipelineError, RunOptions, Runner};
use chartsynth::qa::{QaCandidate, RlRecord, SftRecord};

fn worker() -> Vec<String> {
    vec![env!("CARGO_BIN_EXE_stub-worker").to_string()]
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_fixture(dir.path(), worker()).unwrap();
    (dir, manifest)
}

fn mock_for(fixture: &Path) -> Arc<MockBackend> {
    Arc::new(MockBackend::new(
        MockScript::load(&fixture.join("mock.json")).unwrap(),
    ))
}

fn run(
    manifest: &Path,
    opts: RunOptions,
) -> Result<chartsynth::pipeline::RunSummary, PipelineError> {
    Runner::new(Manifest::load(manifest).unwrap(), opts)?.run()
}

/// Every file under `root` (relative path → bytes).
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Asserts two trees hold the same files with the same bytes.
fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree(a), tree(b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    let differing: Vec<_> = ta
        .iter()
        .filter(|(k, v)| tb[*k] != **v)
        .map(|(k, _)| k.display().to_string())
        .collect();
    assert!(differing.is_empty(), "differing files: {differing:?}");
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn fixture_run_produces_expected_dataset() {
    let (dir, manifest) = setup();
    let mock = mock_for(dir.path());
    let summary = run(
        &manifest,
        RunOptions {
            mock: Some(mock.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(summary.failed(), 0);
    let out = dir.path().join("out");

    assert_eq!(lines(&out.join("score/records.jsonl")), CHARTS);
    assert_eq!(lines(&out.join("filter_hard/hard.jsonl")), 11);
    assert_eq!(lines(&out.join("cold_start/records.jsonl")), 10);
    assert_eq!(lines(&out.join("coder_set/iter0.jsonl")), 10);
    assert_eq!(
        lines(&out.join("self_enhance/iter1/sample/candidates.jsonl")),
        5
    );
    assert_eq!(
        lines(&out.join("self_enhance/iter1/boost/boosted.jsonl")),
        2
    );
    assert_eq!(
        lines(&out.join("self_enhance/iter2/sample/candidates.jsonl")),
        5
    );
    assert_eq!(
        lines(&out.join("self_enhance/iter2/boost/boosted.jsonl")),
        3
    );
    assert_eq!(lines(&out.join("coder_set/iter2.jsonl")), 15);
    assert_eq!(lines(&out.join("synth/dataset.jsonl")), 14);

    let boost_ledger =
        std::fs::read_to_string(out.join("self_enhance/iter1/boost/ledger.jsonl")).unwrap();
    for cause in ["rpe_below_threshold", "too_similar", "exec_error"] {
        assert!(boost_ledger.contains(cause), "{cause}");
    }

    let qa: Vec<QaCandidate> = read_jsonl(&out.join("cot_filter/candidates.jsonl")).unwrap();
    assert!(qa.iter().any(|c| !c.consistent));
    let patterns: std::collections::BTreeSet<Vec<bool>> = qa
        .iter()
        .filter(|c| c.consistent)
        .map(|c| c.traces.iter().map(|t| t.matches_gt).collect())
        .collect();
    assert_eq!(patterns.len(), 8);

    let rl: Vec<RlRecord> = read_jsonl(&out.join("bucket/rl.jsonl")).unwrap();
    let sft: Vec<SftRecord> = read_jsonl(&out.join("bucket/sft.jsonl")).unwrap();
    assert_eq!(rl.len(), 3);
    assert!(!sft.is_empty());
    assert!(validate_dataset(&out, 3).unwrap().is_empty());
    assert!(out.join("diagnose/report.json").exists());
    assert!(mock.max_in_flight() <= 8);
}

#[test]
fn two_runs_are_byte_identical() {
    let (a, ma) = setup();
    let (b, mb) = setup();
    run(&ma, RunOptions::default()).unwrap();
    run(
        &mb,
        RunOptions {
            max_parallel: Some(3),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_same_tree(&a.path().join("out"), &b.path().join("out"));
}

#[test]
fn repeated_interrupts_resume_without_duplicate_calls() {
    let (clean_dir, clean_manifest) = setup();
    let clean_mock = mock_for(clean_dir.path());
    run(
        &clean_manifest,
        RunOptions {
            mock: Some(clean_mock.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let clean_calls = clean_mock.calls();

    let (dir, manifest) = setup();
    let mut calls = 0;
    let mut interrupts = 0;
    loop {
        let mock = mock_for(dir.path());
        let opts = RunOptions {
            mock: Some(mock.clone()),
            stop_after: Some(17),
            ..RunOptions::default()
        };
        let res = run(&manifest, opts);
        calls += mock.calls();
        match res {
            Ok(_) => break,
            Err(PipelineError::Interrupted) => interrupts += 1,
            Err(e) => panic!("{e}"),
        }
        assert!(interrupts < 100);
    }
    assert!(interrupts >= 5, "{interrupts}");
    assert_eq!(calls, clean_calls);
    assert_same_tree(&dir.path().join("out"), &clean_dir.path().join("out"));
}

#[test]
fn rerunning_a_finished_run_makes_no_calls() {
    let (dir, manifest) = setup();
    run(&manifest, RunOptions::default()).unwrap();
    let before = tree(&dir.path().join("out"));
    let mock = mock_for(dir.path());
    let summary = run(
        &manifest,
        RunOptions {
            mock: Some(mock.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(mock.calls(), 0);
    // Coder-set export and diagnose rewrite reports from upstream output and have no ledger.
    for s in summary
        .stages
        .iter()
        .filter(|s| !["export_coder_set", "diagnose"].contains(&s.stage.as_str()))
    {
        assert_eq!(
            s.tally.retained + s.tally.dropped + s.tally.emitted,
            0,
            "{} {:?}",
            s.stage,
            s.tally
        );
    }
    assert!(tree(&dir.path().join("out")) == before);
}

#[test]
fn corrupted_answer_is_caught_by_validate() {
    let (dir, manifest) = setup();
    run(&manifest, RunOptions::default()).unwrap();
    let sft_path = dir.path().join("out/bucket/sft.jsonl");
    let mut records: Vec<SftRecord> = read_jsonl(&sft_path).unwrap();
    records[1].answer = "999".into();
    let victim = records[1].qa_id.clone();
    chartsynth::pipeline::jsonl::write_jsonl(&sft_path, &records).unwrap();
    let violations = validate_dataset(&dir.path().join("out"), 3).unwrap();
    assert!(!violations.is_empty());
    assert!(violations.iter().all(|v| v.qa_id == victim && v.line == 2));
}

#[test]
fn corrupt_ledger_halts_with_position() {
    let (dir, manifest) = setup();
    run(&manifest, RunOptions::default()).unwrap();
    let ledger = dir.path().join("out/cold_start/ledger.jsonl");
    let mut text = std::fs::read_to_string(&ledger).unwrap();
    text.push_str("{truncated\n");
    std::fs::write(&ledger, text).unwrap();
    match run(&manifest, RunOptions::default()) {
        Err(PipelineError::Corrupt { path, line, .. }) => {
            assert_eq!(path, ledger);
            assert_eq!(line, 12);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_upstream_output_is_reported() {
    let (dir, manifest) = setup();
    let runner = Runner::new(Manifest::load(&manifest).unwrap(), RunOptions::default()).unwrap();
    match runner.run_named("cold_start") {
        Err(PipelineError::MissingInput { needs, .. }) => assert_eq!(needs, "filter_hard"),
        other => panic!("{other:?}"),
    }
    drop(dir);
}
