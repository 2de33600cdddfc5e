//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chartsynth::answer::NormalizedMatch;
use chartsynth::broker::Broker;
use chartsynth::cot_filter::{
    filter_trace, find_repeated_ngram, validate_length, FilterConfig, Rule,
};
use chartsynth::diagnostics::{
    build_report, color_entropy, embedding_spread, CorpusItem, ReportConfig,
};
use chartsynth::forge::{boost_decision, filter_hard, BoostThresholds, ChartRecord};
use chartsynth::gateway::{
    EndpointConfig, Gateway, MockBackend, MockRule, MockScript, SamplingPreset,
};
use chartsynth::pipeline::fixture::write_fixture;
use chartsynth::pipeline::jsonl::{read_jsonl, write_jsonl};
use chartsynth::pipeline::{validate_dataset, Manifest, PipelineError, RunOptions, Runner};
use chartsynth::prompts::PromptCatalog;
use chartsynth::qa::{
    bucket, distill_traces, fail_rate, qa_id, BucketConfig, QaCandidate, QaContext, SftRecord,
};
use chartsynth::rpe::{rpe, EmbeddingMatrix, RpeConfig, RpeScore, RpeValue};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_chartsynth")
}

fn worker() -> Vec<String> {
    vec![exe().to_string(), "stub-worker".to_string()]
}

fn cli(args: &[&str]) -> Output {
    Command::new(exe())
        .args(args)
        .output()
        .expect("spawn chartsynth")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `root` keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tree_diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// RPE

fn score(rows: &[Vec<f64>], attempted: usize) -> RpeValue {
    let m = EmbeddingMatrix::from_rows(rows).unwrap();
    rpe(attempted, Some(&m), &RpeConfig::default())
        .unwrap()
        .unwrap()
        .value
}

fn finite(v: RpeValue) -> f64 {
    v.as_finite().expect("finite score")
}

fn rpe_analytic() -> Check {
    let start = Instant::now();
    let basis = |i: usize| {
        (0..16)
            .map(|j| f64::from(u8::from(i == j)))
            .collect::<Vec<f64>>()
    };
    let three: Vec<Vec<f64>> = (0..3).map(basis).collect();
    // centered Gram of three orthonormal rows is I − J/3: eigenvalues {1, 1, 0}
    let expected = 2f64.ln() / 3.0;
    let got = finite(score(&three, 8));
    ensure((got - expected).abs() <= 1e-9, || {
        format!("K=3 orthonormal: {got} vs {expected}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 1..=2 {
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect())
                .collect();
            let v = finite(score(&rows, 8));
            ensure(v == 0.0, || format!("K={k} scored {v}, expected exactly 0"))?;
        }
    }
    let sentinel = rpe(8, None, &RpeConfig::default()).unwrap().unwrap();
    ensure(
        sentinel.value == RpeValue::MaxDifficulty && sentinel.valid_count == 0,
        || format!("K=0 gave {:?}", sentinel.value),
    )?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("K=3 → {got:.10}; K≤2 → 0; K=0 → sentinel"))
}

/// SVD of the centered matrix; squared singular values are the Gram spectrum.
fn svd_oracle(rows: &[Vec<f64>]) -> f64 {
    let (k, d) = (rows.len(), rows[0].len());
    let mut m = DMatrix::from_fn(k, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = m.column(j).sum() / k as f64;
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let fro = m.norm_squared();
    let eig: Vec<f64> = m
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s * s)
        .collect();
    let total: f64 = eig.iter().sum();
    if total <= 1e-12 * fro.max(1.0) {
        return 0.0;
    }
    eig.iter()
        .map(|v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        / k as f64
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    loop {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        let err = (q.transpose() * &q - DMatrix::<f64>::identity(d, d))
            .abs()
            .max();
        if err < 1e-12 {
            return q;
        }
    }
}

fn rpe_properties() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst_oracle = 0f64;
    let mut worst_invariance = 0f64;
    for case in 0..200 {
        let k = rng.random_range(2..=8);
        let d = rng.random_range(1..=32);
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let base = finite(score(&rows, 8));
        let oracle = svd_oracle(&rows);
        worst_oracle = worst_oracle.max((base - oracle).abs());
        ensure((base - oracle).abs() <= 1e-9, || {
            format!("case {case}: eigen {base} vs svd {oracle}")
        })?;

        let q = random_orthogonal(d, &mut rng);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                (DMatrix::from_row_slice(1, d, r) * &q)
                    .iter()
                    .copied()
                    .collect()
            })
            .collect();
        let s: f64 = rng.random_range(0.01..100.0);
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| s * v).collect())
            .collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let translated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&shift).map(|(v, t)| v + t).collect())
            .collect();
        let mut permuted = rows.clone();
        permuted.shuffle(&mut rng);
        for (name, variant) in [
            ("rotation", rotated),
            ("scale", scaled),
            ("translation", translated),
            ("permutation", permuted),
        ] {
            let v = finite(score(&variant, 8));
            worst_invariance = worst_invariance.max((v - base).abs());
            ensure((v - base).abs() <= 1e-8, || {
                format!("case {case}: {name} moved {base} to {v}")
            })?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "200 matrices; max |eigen−svd| {worst_oracle:.1e}, max invariance drift {worst_invariance:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// Thresholds

fn scored(id: &str, value: RpeValue) -> ChartRecord {
    let mut r = ChartRecord::external(id.to_string());
    r.rpe = Some(RpeScore {
        value,
        valid_count: 8,
        attempted_count: 8,
        low_valid: false,
    });
    r
}

fn threshold_semantics() -> Check {
    let records = vec![
        scored("a", RpeValue::Finite(0.39)),
        scored("b", RpeValue::Finite(0.40)),
        scored("c", RpeValue::Finite(0.41)),
    ];
    let (kept, dropped) = filter_hard(&records, 0.4).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = kept.iter().map(|r| r.chart_id.as_str()).collect();
    ensure(ids == ["b", "c"] && dropped.len() == 1, || {
        format!("filter_hard kept {ids:?}")
    })?;

    let t = BoostThresholds::default();
    let s = |v: RpeValue| scored("x", v).rpe.unwrap();
    let cases = [
        (RpeValue::Finite(0.40), 0.65, true),
        (RpeValue::Finite(0.40), 0.66, false),
        (RpeValue::Finite(0.39), 0.10, false),
        (RpeValue::Finite(0.41), 0.65, true),
        (RpeValue::MaxDifficulty, 0.65, true),
        (RpeValue::MaxDifficulty, 0.66, false),
    ];
    for (v, sim, want) in cases {
        let got = boost_decision(&s(v), sim, &t);
        ensure(got == want, || {
            format!("boost(rpe {v}, sim {sim}) = {got}, expected {want}")
        })?;
    }
    Ok("filter_hard{0.39,0.40,0.41}@0.4 keeps 2; boost boundaries inclusive at 0.40/0.65, 0.66 excluded".into())
}

// ---------------------------------------------------------------------------
// Fail rate and bucketing

const GT: &str = "42";

fn question(pattern: u32) -> String {
    format!("What is quantity Q-{pattern}?")
}

fn trace_text(correct: bool) -> String {
    let answer = if correct { GT } else { "17" };
    format!("<think>reading the bars and adding them up</think><answer>{answer}</answer>")
}

fn fail_rate_and_bucketing() -> Check {
    // bit j of the pattern marks trace j as wrong
    let mut rules = Vec::new();
    for p in 0..8u32 {
        for j in 0..3u32 {
            let wrong = p >> j & 1 == 1;
            rules.push(
                MockRule::texts(&format!("Q-{p}?"), vec![trace_text(!wrong)])
                    .with_seed(u64::from(p) * 100 + u64::from(j)),
            );
        }
    }
    let mock = Arc::new(MockBackend::new(MockScript {
        rules,
        strict: true,
        ..MockScript::default()
    }));
    let gateway = Gateway::new(mock.clone());
    let broker = Broker::start(worker(), 1).map_err(|e| e.to_string())?;
    let prompts = PromptCatalog::packaged();
    let ctx = QaContext {
        gateway: &gateway,
        broker: &broker,
        prompts: &prompts,
        matcher: &NormalizedMatch,
        script_timeout_s: 10.0,
    };
    let endpoint = EndpointConfig::new("mock://accept", "cot");

    let mut candidates = Vec::new();
    for p in 0..8u32 {
        let traces = distill_traces(
            &ctx,
            &endpoint,
            SamplingPreset::REASONING,
            b"png",
            &question(p),
            GT,
            3,
            u64::from(p) * 100,
        )
        .map_err(|e| e.to_string())?;
        let rate = fail_rate(&traces, 3).map_err(|e| e.to_string())?;
        let wrong = p.count_ones();
        ensure(rate.failures == wrong && rate.traces == 3, || {
            format!("pattern {p:03b}: {rate:?}")
        })?;
        ensure(rate.value() == f64::from(wrong) / 3.0, || {
            format!("pattern {p:03b}: r = {}", rate.value())
        })?;
        ensure(rate.is_interior() == (wrong == 1 || wrong == 2), || {
            format!("pattern {p:03b}: interior")
        })?;
        let chart = format!("chart{p}");
        candidates.push(QaCandidate {
            qa_id: qa_id(&chart, 0),
            chart_id: chart,
            image_ref: format!("img{p}"),
            script_index: 0,
            script: "print(42)".into(),
            answer_py: GT.into(),
            question: question(p),
            consistency_answer: GT.into(),
            consistent: true,
            traces,
            fail_rate: Some(rate),
            bucket: None,
        });
    }
    broker.shutdown();
    ensure(mock.calls() == 24, || {
        format!("{} model calls, expected 24", mock.calls())
    })?;

    for quota in 0..=7 {
        let cfg = BucketConfig {
            rl_quota: quota,
            sft_traces: 1,
        };
        let got = bucket(&candidates, &cfg);
        // oracle: interior candidates ranked by failures (desc), then qa_id
        let mut interior: Vec<(u32, String)> = candidates
            .iter()
            .filter(|c| (1..=2).contains(&c.fail_rate.unwrap().failures))
            .map(|c| (c.fail_rate.unwrap().failures, c.qa_id.clone()))
            .collect();
        interior.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let want_rl: Vec<String> = interior.iter().take(quota).map(|x| x.1.clone()).collect();
        let mut want_sft: Vec<String> = interior.iter().skip(quota).map(|x| x.1.clone()).collect();
        want_sft.sort();
        let got_rl: Vec<String> = got.rl.iter().map(|r| r.qa_id.clone()).collect();
        let mut got_sft: Vec<String> = got.sft.iter().map(|r| r.qa_id.clone()).collect();
        got_sft.sort();
        ensure(got_rl == want_rl, || {
            format!("quota {quota}: rl {got_rl:?}, expected {want_rl:?}")
        })?;
        ensure(got_sft == want_sft, || {
            format!("quota {quota}: sft {got_sft:?}, expected {want_sft:?}")
        })?;
        let causes: BTreeMap<String, String> = got
            .rejected
            .iter()
            .map(|r| (r.qa_id.clone(), r.cause.clone()))
            .collect();
        ensure(
            causes.len() == 2
                && causes[&candidates[0].qa_id] == "trivial"
                && causes[&candidates[7].qa_id] == "unsolved",
            || format!("quota {quota}: rejected {causes:?}"),
        )?;
        for s in &got.sft {
            ensure(
                s.cot_trace.contains(&format!("<answer>{GT}</answer>")),
                || format!("sft {} carries a wrong trace", s.qa_id),
            )?;
        }
        let mut reversed = candidates.clone();
        reversed.reverse();
        let again = bucket(&reversed, &cfg);
        ensure(
            again
                .rl
                .iter()
                .map(|r| &r.qa_id)
                .eq(got.rl.iter().map(|r| &r.qa_id)),
            || format!("quota {quota}: rl order depends on input order"),
        )?;
    }
    Ok("8/8 trace patterns give r = popcount/3 exactly; interior retained; quotas 0..=7 match oracle".into())
}

// ---------------------------------------------------------------------------
// Full pipeline runs shared by the remaining criteria

struct Runs {
    _tmp: tempfile::TempDir,
    a: PathBuf,
    b: PathBuf,
}

const GOLDEN: &[&str] = &[
    "bucket/ledger.jsonl",
    "bucket/rejected.jsonl",
    "bucket/rl.jsonl",
    "bucket/sft.jsonl",
    "coder_set/iter0.jsonl",
    "coder_set/iter1.jsonl",
    "coder_set/iter2.jsonl",
    "cold_start/ledger.jsonl",
    "cold_start/records.jsonl",
    "cot_distill/candidates.jsonl",
    "cot_distill/ledger.jsonl",
    "cot_filter/candidates.jsonl",
    "cot_filter/ledger.jsonl",
    "cot_filter/report.json",
    "diagnose/comparison.csv",
    "diagnose/comparison.txt",
    "diagnose/embeddings.csv",
    "diagnose/report.json",
    "filter_hard/hard.jsonl",
    "filter_hard/index.json",
    "filter_hard/ledger.jsonl",
    "qa_synth/candidates.jsonl",
    "qa_synth/ledger.jsonl",
    "score/ledger.jsonl",
    "score/records.jsonl",
    "self_enhance/iter1/boost/boosted.jsonl",
    "self_enhance/iter1/boost/ledger.jsonl",
    "self_enhance/iter1/sample/candidates.jsonl",
    "self_enhance/iter1/sample/ledger.jsonl",
    "self_enhance/iter2/boost/boosted.jsonl",
    "self_enhance/iter2/boost/ledger.jsonl",
    "self_enhance/iter2/sample/candidates.jsonl",
    "self_enhance/iter2/sample/ledger.jsonl",
    "synth/dataset.jsonl",
    "synth/ledger.jsonl",
    "synth/manifest.json",
];

fn cli_run(dir: &Path, extra: &[&str]) -> Result<Output, String> {
    let manifest = dir.join("manifest.json");
    let mut args = vec!["run", manifest.to_str().unwrap()];
    args.extend_from_slice(extra);
    Ok(cli(&args))
}

fn fixture_dir(root: &Path, name: &str) -> Result<PathBuf, String> {
    let dir = root.join(name);
    let o = cli(&["fixture", "--out", dir.to_str().unwrap()]);
    ensure(o.status.success(), || {
        format!("fixture: {}", String::from_utf8_lossy(&o.stderr))
    })?;
    Ok(dir)
}

fn end_to_end(runs: &mut Option<Runs>) -> Check {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    // two clean runs through the CLI
    let a = fixture_dir(tmp.path(), "a")?;
    let b = fixture_dir(tmp.path(), "b")?;
    for dir in [&a, &b] {
        let o = cli_run(dir, &[])?;
        ensure(o.status.code() == Some(0), || {
            format!(
                "run exited {:?}: {}",
                o.status.code(),
                String::from_utf8_lossy(&o.stderr)
            )
        })?;
    }
    let ta = tree(&a.join("out"));
    let tb = tree(&b.join("out"));
    let files: Vec<&str> = ta
        .keys()
        .filter(|k| !k.starts_with("store/"))
        .map(String::as_str)
        .collect();
    ensure(files == GOLDEN, || {
        format!("file set differs from golden list: {files:?}")
    })?;
    let diff = tree_diff(&ta, &tb);
    ensure(diff.is_empty(), || format!("runs differ in {diff:?}"))?;

    // CLI interrupt and resume reproduces the clean tree
    let c = fixture_dir(tmp.path(), "c")?;
    let o = cli_run(&c, &["--stop-after", "25"])?;
    ensure(o.status.code() == Some(1), || {
        format!("interrupted run exited {:?}", o.status.code())
    })?;
    let o = cli_run(&c, &[])?;
    ensure(o.status.code() == Some(0), || {
        format!("resumed run exited {:?}", o.status.code())
    })?;
    let diff = tree_diff(&ta, &tree(&c.join("out")));
    ensure(diff.is_empty(), || {
        format!("resumed CLI run differs in {diff:?}")
    })?;

    // in-process runs with a call-counting mock
    let run_with =
        |dir: &Path, stop_after: Option<usize>| -> (Arc<MockBackend>, Result<_, PipelineError>) {
            let mock = Arc::new(MockBackend::new(
                MockScript::load(&dir.join("mock.json")).unwrap(),
            ));
            let manifest = Manifest::load(&dir.join("manifest.json")).unwrap();
            let opts = RunOptions {
                mock: Some(mock.clone()),
                stop_after,
                ..RunOptions::default()
            };
            let result = Runner::new(manifest, opts).and_then(|r| r.run());
            (mock, result)
        };
    let clean_dir = tmp.path().join("clean");
    write_fixture(&clean_dir, worker()).map_err(|e| e.to_string())?;
    let (clean_mock, res) = run_with(&clean_dir, None);
    res.map_err(|e| e.to_string())?;
    let bodies = |m: &MockBackend| -> Vec<String> {
        m.requests()
            .iter()
            .map(|r| format!("{} {}", r.path, r.body))
            .collect()
    };
    let mut clean_requests = bodies(&clean_mock);
    clean_requests.sort();

    let resumed_dir = tmp.path().join("resumed");
    write_fixture(&resumed_dir, worker()).map_err(|e| e.to_string())?;
    let (first, res) = run_with(&resumed_dir, Some(10));
    ensure(matches!(res, Err(PipelineError::Interrupted)), || {
        format!("interrupted run returned {res:?}")
    })?;
    let (second, res) = run_with(&resumed_dir, None);
    let summary = res.map_err(|e| e.to_string())?;
    let score = &summary.stages[0];
    ensure(
        score.stage == "score"
            && score.tally.skipped == 10
            && score.tally.retained + score.tally.dropped == 10,
        || format!("resume after 10/20 processed {:?}", score.tally),
    )?;
    let mut resumed_requests = bodies(&first);
    resumed_requests.extend(bodies(&second));
    resumed_requests.sort();
    let duplicates = resumed_requests.len().saturating_sub(clean_requests.len());
    ensure(resumed_requests == clean_requests, || {
        format!(
            "interrupted+resumed issued {} calls vs {} clean ({duplicates} extra)",
            resumed_requests.len(),
            clean_requests.len()
        )
    })?;
    let diff = tree_diff(&tree(&clean_dir.join("out")), &ta);
    ensure(diff.is_empty(), || {
        format!("in-process run differs from CLI run in {diff:?}")
    })?;
    let diff = tree_diff(&tree(&resumed_dir.join("out")), &ta);
    ensure(diff.is_empty(), || {
        format!("resumed run differs in {diff:?}")
    })?;

    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    let detail = format!(
        "{} files byte-identical across runs; resume after 10/20 scored 10; {} calls, 0 duplicates; {:.1}s",
        ta.len(),
        clean_requests.len(),
        elapsed.as_secs_f64()
    );
    *runs = Some(Runs { _tmp: tmp, a, b });
    Ok(detail)
}

fn truth_anchor(runs: &Option<Runs>) -> Check {
    let runs = runs.as_ref().ok_or("needs the end-to-end runs")?;
    let out = runs.a.join("out");
    let violations = validate_dataset(&out, 3).map_err(|e| e.to_string())?;
    ensure(violations.is_empty(), || {
        format!("clean output has violations: {violations:?}")
    })?;
    let o = cli(&["validate", out.to_str().unwrap()]);
    ensure(o.status.code() == Some(0), || {
        format!("validate exited {:?}", o.status.code())
    })?;

    // corrupt one ground-truth answer in the second run's output
    let sft_path = runs.b.join("out/bucket/sft.jsonl");
    let mut sft: Vec<SftRecord> = read_jsonl(&sft_path).map_err(|e| e.to_string())?;
    ensure(sft.len() >= 2, || "too few sft records".into())?;
    let victim = sft[1].qa_id.clone();
    sft[1].answer = format!("{}1", sft[1].answer);
    write_jsonl(&sft_path, &sft).map_err(|e| e.to_string())?;
    let o = cli(&["validate", runs.b.join("out").to_str().unwrap()]);
    let text = stdout(&o);
    ensure(o.status.code() == Some(1), || {
        format!("validate on mutated data exited {:?}", o.status.code())
    })?;
    ensure(text.contains(&victim), || {
        format!("validate output does not name {victim}: {text}")
    })?;
    let flagged: Vec<String> = validate_dataset(&runs.b.join("out"), 3)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|v| v.qa_id)
        .collect();
    ensure(
        !flagged.is_empty() && flagged.iter().all(|q| *q == victim),
        || format!("flagged {flagged:?}"),
    )?;
    Ok(format!(
        "0 violations on clean output; mutated answer caught for qa_id {victim}"
    ))
}

// ---------------------------------------------------------------------------
// n-gram filter

/// Counts every window explicitly.
fn window_oracle(tokens: &[String], n: usize, min_repeats: usize) -> bool {
    if tokens.len() < n {
        return false;
    }
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    for w in tokens.windows(n) {
        let c = counts.entry(w).or_default();
        *c += 1;
        if *c >= min_repeats {
            return true;
        }
    }
    false
}

fn ngram_filter() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut flagged = 0;
    for case in 0..500 {
        let len = rng.random_range(0..=2000);
        let vocab = rng.random_range(2..=400);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| format!("t{}", rng.random_range(0..vocab)))
            .collect();
        let n = rng.random_range(1..=60);
        let reps = rng.random_range(2..=4);
        // plant repeated blocks in half of the cases
        if case % 2 == 0 && len > 0 {
            let block_len = rng.random_range(1..=n.min(len));
            let block: Vec<String> = tokens[..block_len].to_vec();
            for _ in 0..rng.random_range(1..=4) {
                let at = rng.random_range(0..=tokens.len());
                tokens.splice(at..at, block.iter().cloned());
            }
        }
        let sep: Vec<&str> = (0..tokens.len())
            .map(|_| [" ", "  ", "\n", "\t"][rng.random_range(0..4)])
            .collect();
        let text: String = tokens
            .iter()
            .zip(&sep)
            .map(|(t, s)| format!("{t}{s}"))
            .collect();
        let got = find_repeated_ngram(&text, n, reps).is_some();
        let want = window_oracle(&tokens, n, reps);
        ensure(got == want, || {
            format!(
                "case {case}: n={n} reps={reps} len={} got {got}, oracle {want}",
                tokens.len()
            )
        })?;
        flagged += usize::from(want);
    }

    let cfg = FilterConfig::default();
    let block: Vec<String> = (0..50).map(|i| format!("b{i}")).collect();
    let with_blocks = |copies: usize| {
        let mut words: Vec<String> = (0..40).map(|i| format!("lead{i}")).collect();
        for _ in 0..copies {
            words.extend(block.iter().cloned());
        }
        words.extend((0..40).map(|i| format!("tail{i}")));
        format!("<think>{}</think><answer>1</answer>", words.join(" "))
    };
    let ngram_failed = |text: &str| {
        filter_trace(text, &cfg)
            .failures
            .iter()
            .any(|f| f.rule == Rule::Ngram)
    };
    ensure(ngram_failed(&with_blocks(3)), || {
        "3× 50-token block not flagged".into()
    })?;
    ensure(!ngram_failed(&with_blocks(2)), || {
        "2× 50-token block flagged".into()
    })?;
    ensure(filter_trace(&with_blocks(2), &cfg).passed, || {
        "2× block trace rejected".into()
    })?;

    let words = |k: usize| {
        let body: Vec<String> = (0..k).map(|i| format!("w{i}")).collect();
        format!("<think>{}</think><answer>1</answer>", body.join(" "))
    };
    ensure(validate_length(&words(100), 100).passed, || {
        "100 words rejected".into()
    })?;
    ensure(!validate_length(&words(99), 100).passed, || {
        "99 words accepted".into()
    })?;
    Ok(format!("500 sequences match the window oracle ({flagged} flagged); 3×/2× blocks; 100-word bound inclusive"))
}

// ---------------------------------------------------------------------------
// Diagnostics

fn png(w: u32, h: u32, pixel: impl Fn(u32, u32) -> [u8; 3]) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb(pixel(x, y)));
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .unwrap();
    bytes
}

fn diagnostics() -> Check {
    let e = |b: &[u8]| color_entropy(b).map_err(|e| e.to_string());
    let uniform = e(&png(32, 32, |_, _| [120, 30, 200]))?;
    ensure(uniform == 0.0, || {
        format!("uniform image entropy {uniform}")
    })?;
    let half = e(&png(32, 32, |x, _| {
        if x < 16 {
            [0, 0, 0]
        } else {
            [255, 255, 255]
        }
    }))?;
    ensure((half - 2f64.ln()).abs() <= 1e-6, || {
        format!("half/half entropy {half}")
    })?;
    let quad = e(&png(32, 32, |x, y| match (x < 16, y < 16) {
        (true, true) => [0, 0, 0],
        (true, false) => [255, 0, 0],
        (false, true) => [0, 255, 0],
        (false, false) => [0, 0, 255],
    }))?;
    ensure((quad - 4f64.ln()).abs() <= 1e-6, || {
        format!("four-color entropy {quad}")
    })?;

    let s = |v: &[Vec<f64>]| embedding_spread(v).map_err(|e| e.to_string());
    let same = s(&vec![vec![0.3, -1.0, 2.0]; 5])?;
    ensure(same.abs() <= 1e-12, || format!("identical spread {same}"))?;
    let ortho = s(&[vec![1.0, 0.0], vec![0.0, 1.0]])?;
    ensure((ortho - 1.0).abs() <= 1e-12, || {
        format!("orthonormal spread {ortho}")
    })?;
    let anti = s(&[vec![1.0, 0.0], vec![-1.0, 0.0]])?;
    ensure((anti - 2.0).abs() <= 1e-12, || {
        format!("antipodal spread {anti}")
    })?;

    let items: Vec<CorpusItem> = (0..30)
        .map(|i| CorpusItem {
            id: format!("c{i}"),
            image: Some(png(8, 8, move |x, _| [(i * 8) as u8, x as u8 * 30, 0])),
            embedding: Some(vec![f64::from(i), 1.0, -2.0]),
            rpe: Some(RpeValue::Finite(f64::from(i) / 100.0)),
        })
        .collect();
    let cfg = ReportConfig {
        sample_size: 12,
        seed: 9,
    };
    let r1 = build_report("x", &items, &cfg);
    let r2 = build_report("x", &items, &cfg);
    ensure(r1 == r2 && r1.sample_size == 12, || {
        "report not deterministic".into()
    })?;
    Ok(format!(
        "uniform 0; half/half {half:.7}; four colors {quad:.7}; spreads 0/1/2"
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let mut runs: Option<Runs> = None;
    let mut results: Vec<(&str, Result<String, String>, Duration)> = Vec::new();
    let mut run = |name: &'static str, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        match &r {
            Ok(detail) => println!("PASS  {name:<26} {:>7.2}s  {detail}", elapsed.as_secs_f64()),
            Err(why) => println!("FAIL  {name:<26} {:>7.2}s  {why}", elapsed.as_secs_f64()),
        }
        results.push((name, r, elapsed));
    };

    run("rpe-analytic", &mut rpe_analytic);
    run("rpe-properties", &mut rpe_properties);
    run("threshold-semantics", &mut threshold_semantics);
    run("fail-rate-bucketing", &mut fail_rate_and_bucketing);
    run("end-to-end-determinism", &mut || end_to_end(&mut runs));
    run("truth-anchor-soundness", &mut || truth_anchor(&runs));
    run("ngram-filter", &mut ngram_filter);
    run("diagnostics", &mut diagnostics);

    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
