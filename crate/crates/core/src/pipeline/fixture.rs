//! The packaged 20-chart mock fixture.
//!
//! Writes a corpus of stub-rendered chart images, a strict mock script that
//! answers every model call the full pipeline makes, and a manifest wiring
//! them to the stub worker. Markers of the form `fx:<label>;` are embedded
//! in chart programs (and hence in rendered PNG text chunks) so the mock can
//! route each request.
//!
//! Scoring patterns cycle with the corpus index: five orthonormal rollouts
//! (RPE ln 4 / 5), three orthonormal (ln 2 / 3), eight identical (0) and two
//! (0); the last chart fails every rollout and gets the sentinel. Because a
//! finite score never exceeds ln(K−1)/K ≈ 0.28 for eight rollouts, the
//! fixture thresholds are 0.2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::jsonl::write_atomic;
use super::manifest::{
    ColdStartStage, DiagnoseStage, DistillStage, EmptyStage, EndpointSpec, Manifest, QaSynthStage,
    ScoreStage, ScoringSpec, SelfEnhanceStage, StageSpec, ThresholdStage, Timeouts,
};
use super::{derive_seed, PipelineError};
use crate::broker::stub::render_png;
use crate::cot_filter::FilterConfig;
use crate::forge::BoostThresholds;
use crate::gateway::{MockMatch, MockResponse, MockRule, MockScript, RetryPolicy, SamplingPreset};
use crate::qa::{qa_id, BucketConfig};
use crate::rpe::{SpectrumSource, ZeroValidPolicy};
use crate::store::digest_hex;

pub const FIXTURE_SEED: u64 = 7;
pub const CHARTS: usize = 20;
pub const ROLLOUTS: u32 = 8;
const DIM: usize = 8;
const THRESHOLD: f64 = 0.2;
const SAMPLES: u32 = 7;
const SCRIPTS: u32 = 2;
const TRACES: u32 = 3;
pub const RL_QUOTA: usize = 3;

const ROLLOUT_MODEL: &str = "rollout-vlm";
const EMBED_MODEL: &str = "embedder";
const CODEGEN_MODEL: &str = "codegen-llm";
const QA_MODEL: &str = "qa-llm";
const COT_MODEL: &str = "cot-vlm";

/// How the rollouts of one image behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Spread {
    /// Five orthonormal reconstructions, three failures.
    Five,
    /// Three orthonormal reconstructions, five failures.
    Three,
    /// Eight identical reconstructions.
    Same,
    /// Two reconstructions, six failures.
    Two,
    /// Every rollout fails.
    None,
}

fn basis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn corpus_vec(k: usize) -> Vec<f64> {
    let mut v = basis(k % 4);
    v[4] = 0.1 * (k / 4) as f64;
    unit(v)
}

fn marker(label: &str) -> String {
    format!("fx:{label};")
}

/// A chart program carrying `label`'s marker plus extra stub directives.
fn program(label: &str, extra: &[&str]) -> String {
    let mut lines = vec![
        "import matplotlib.pyplot as plt".to_string(),
        format!("#stub: tag {}", marker(label)),
    ];
    lines.extend(extra.iter().map(|s| s.to_string()));
    lines.push("fig, ax = plt.subplots(figsize=(6, 4))".into());
    lines.push(format!(
        "ax.bar(['a', 'b', 'c'], [3, 1, 2], label='{label}')"
    ));
    lines.push("plt.savefig('image.png')".into());
    lines.join("\n")
}

fn fenced(code: &str) -> String {
    format!("Here is the code.\n```python\n{code}\n```\n")
}

const FAILING: &[&str] = &[
    "#stub: stderr Traceback: ValueError: shape mismatch",
    "#stub: exit 1",
];

fn chat(model: &str, substring: Option<String>, seed: Option<u64>, texts: Vec<String>) -> MockRule {
    MockRule {
        matcher: MockMatch {
            substring,
            index: None,
            model: Some(model.into()),
            seed,
        },
        respond: MockResponse {
            texts: Some(texts),
            ..MockResponse::default()
        },
        repeat: None,
    }
}

fn vector(substring: String, v: Vec<f64>) -> MockRule {
    MockRule::vector(&substring, v).for_model(EMBED_MODEL)
}

/// Rollout completions and reconstruction embeddings for image `label`.
fn rollout_rules(rules: &mut Vec<MockRule>, label: &str, spread: Spread) {
    let ok = match spread {
        Spread::Five => 5,
        Spread::Three => 3,
        Spread::Two => 2,
        Spread::Same | Spread::None => 0,
    };
    let texts: Vec<String> = (0..ROLLOUTS as usize)
        .map(|j| {
            let r = format!("r{label}_{j}");
            if spread == Spread::Same {
                fenced(&program(&format!("r{label}_0"), &[]))
            } else if j < ok {
                fenced(&program(&r, &[]))
            } else if j == ROLLOUTS as usize - 1 {
                "I am unable to reproduce this figure.".to_string()
            } else {
                fenced(&program(&r, FAILING))
            }
        })
        .collect();
    rules.push(chat(ROLLOUT_MODEL, Some(marker(label)), None, texts));
    if spread == Spread::Same {
        rules.push(vector(marker(&format!("r{label}_0")), basis(0)));
    }
    for j in 0..ok {
        rules.push(vector(marker(&format!("r{label}_{j}")), basis(j)));
    }
}

struct Chart {
    label: String,
    code: String,
}

impl Chart {
    fn new(label: &str, extra: &[&str]) -> Self {
        Self {
            label: label.into(),
            code: program(label, extra),
        }
    }

    fn id(&self) -> String {
        digest_hex(self.code.as_bytes())
    }
}

fn spread_for(k: usize) -> Spread {
    if k == CHARTS - 1 {
        return Spread::None;
    }
    match k % 4 {
        0 => Spread::Five,
        1 => Spread::Three,
        2 => Spread::Same,
        _ => Spread::Two,
    }
}

/// Corpus indices whose score passes the fixture threshold.
fn hard_indices() -> Vec<usize> {
    (0..CHARTS)
        .filter(|&k| matches!(spread_for(k), Spread::Five | Spread::Three | Spread::None))
        .collect()
}

const COLD_FAIL: usize = 5;
const COLD_LOW: usize = 13;
/// Coder samples that pass both boost filters, in pipeline order.
const BOOSTED: [&str; 5] = ["k1a", "k1b", "k2a", "k2b", "k2c"];

/// One scripted coder sample.
enum Sample {
    Chart {
        label: &'static str,
        spread: Spread,
        vec: Vec<f64>,
        fails: bool,
    },
    Repeat(&'static str),
    NoCode,
}

fn samples(iteration: u32) -> Vec<Sample> {
    use Sample::*;
    let ok = |label, spread, vec| Chart {
        label,
        spread,
        vec,
        fails: false,
    };
    match iteration {
        1 => vec![
            ok("k1a", Spread::Five, basis(5)),
            ok("k1b", Spread::Three, basis(6)),
            ok("k1c", Spread::Same, basis(7)),
            ok("k1d", Spread::Five, corpus_vec(0)),
            Repeat("k1a"),
            NoCode,
            Chart {
                label: "k1e",
                spread: Spread::Five,
                vec: basis(5),
                fails: true,
            },
        ],
        _ => vec![
            ok("k2a", Spread::Five, basis(7)),
            ok(
                "k2b",
                Spread::Three,
                unit(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            ),
            Repeat("k1a"),
            ok(
                "k2c",
                Spread::None,
                unit(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0, 0.0]),
            ),
            NoCode,
            ok("k2d", Spread::Two, basis(6)),
            ok("k2e", Spread::Five, {
                let mut v = corpus_vec(4);
                v[7] = 0.1;
                unit(v)
            }),
        ],
    }
}

fn sample_chart(label: &str, fails: bool) -> Chart {
    Chart::new(label, if fails { FAILING } else { &[] })
}

/// Charts expected in the synthetic dataset, in pipeline order.
fn dataset_charts() -> Vec<Chart> {
    let mut out: Vec<Chart> = hard_indices()
        .into_iter()
        .filter(|&k| k != COLD_FAIL && k != COLD_LOW)
        .map(|k| Chart::new(&format!("h{k:02}"), &[]))
        .collect();
    out.extend(BOOSTED.iter().map(|label| sample_chart(label, false)));
    out
}

fn words(prefix: &str, n: usize) -> String {
    (0..n)
        .map(|t| format!("{prefix}{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Copy)]
enum TraceKind {
    Good,
    Short,
    Looping,
}

fn trace(label: &str, answer: Option<&str>, kind: TraceKind) -> String {
    let body = match kind {
        TraceKind::Good => format!(
            "Reading the chart {label} bar by bar. {}",
            words("observation", 110)
        ),
        TraceKind::Short => format!("Quick look at {label}. {}", words("glance", 30)),
        TraceKind::Looping => {
            let block = words("loop", 50);
            format!("Reading {label}. {block} {block} {block}")
        }
    };
    let tail = match answer {
        Some(a) => format!("Therefore, the final answer is <answer>{a}</answer>."),
        None => "Therefore, the final answer cannot be determined.".into(),
    };
    format!("<think>\n{body}\n</think>\n{tail}")
}

/// Question-answer rules for one dataset chart. `n` numbers the candidate
/// across the dataset and picks its behavior.
fn qa_rules(
    step3: &mut Vec<MockRule>,
    step2: &mut Vec<MockRule>,
    step1: &mut Vec<MockRule>,
    traces: &mut Vec<MockRule>,
    seed: u64,
    chart: &Chart,
    n0: usize,
) {
    let chart_id = chart.id();
    let base = derive_seed(seed, &["qa_synth", &chart_id]);
    for i in 0..SCRIPTS {
        let n = n0 + i as usize;
        let s_marker = marker(&format!("s{}.{i}", chart.label));
        let q_marker = marker(&format!("q{}.{i}", chart.label));
        let answer = format!("{}.25", n + 1);
        let mut script = vec![format!("# {s_marker}"), "import numpy as np".to_string()];
        if n == 6 {
            script.push("#stub: stderr ZeroDivisionError: division by zero".into());
            script.push("#stub: exit 1".into());
        } else {
            script.push(format!("#stub: print {answer}"));
        }
        script.push("print(round(np.mean([3, 1, 2]), 2))".into());
        let step1_text = if n == 3 {
            "The chart shows three bars.".to_string()
        } else {
            format!(
                "<think>compute</think>\n<answer>\n```python\n{}\n```\n</answer>",
                script.join("\n")
            )
        };
        step1.push(chat(
            QA_MODEL,
            Some(marker(&chart.label)),
            Some(base + i as u64),
            vec![step1_text],
        ));

        let step2_text = if n == 15 {
            "I could not phrase a question.".to_string()
        } else {
            format!("<think>reverse</think>\n<question>What is the mean bar height ({q_marker})?</question>")
        };
        step2.push(chat(QA_MODEL, Some(s_marker), None, vec![step2_text]));

        let inferred = match n {
            9 => Some(format!("{}.75", n + 1)),
            12 => None,
            _ if n % 2 == 0 => Some(format!("{}.250", n + 1)),
            _ => Some(answer.clone()),
        };
        let step3_text = match inferred {
            Some(a) => format!("<think>solve</think>\n<answer>{a}</answer>"),
            None => "<think>solve</think>\nThe answer is unclear.".into(),
        };
        step3.push(chat(QA_MODEL, Some(q_marker), None, vec![step3_text]));

        let qid = qa_id(&chart_id, i);
        let tseed = derive_seed(seed, &["cot_distill", &qid]);
        let pattern = n % 8;
        let mut first_correct = true;
        for j in 0..TRACES as usize {
            let correct = pattern >> j & 1 == 1;
            let text = if correct {
                let kind = if first_correct && n % 5 == 0 {
                    TraceKind::Short
                } else if first_correct && n % 7 == 1 {
                    TraceKind::Looping
                } else {
                    TraceKind::Good
                };
                first_correct = false;
                trace(&chart.label, Some(&answer), kind)
            } else if n % 3 == 0 {
                trace(&chart.label, None, TraceKind::Good)
            } else {
                trace(&chart.label, Some(&format!("{}.5", n + 1)), TraceKind::Good)
            };
            traces.push(chat(COT_MODEL, None, Some(tseed + j as u64), vec![text]));
        }
    }
}

pub fn fixture_mock(seed: u64) -> MockScript {
    let mut rules = Vec::new();

    for k in 0..CHARTS {
        let label = format!("c{k:02}");
        rules.push(vector(marker(&label), corpus_vec(k)));
        rollout_rules(&mut rules, &label, spread_for(k));
    }

    for k in hard_indices() {
        let h = format!("h{k:02}");
        let extra = if k == COLD_FAIL { FAILING } else { &[] };
        let code = program(&h, extra);
        rules.push(chat(
            CODEGEN_MODEL,
            Some(marker(&format!("c{k:02}"))),
            None,
            vec![fenced(&code)],
        ));
        let mut v = basis(5 + k % 3);
        v[k % 4] = 0.5;
        rules.push(vector(marker(&h), unit(v)));
        rollout_rules(
            &mut rules,
            &h,
            if k == COLD_LOW {
                Spread::Same
            } else {
                Spread::Five
            },
        );
    }

    for it in 1..=2u32 {
        let base = derive_seed(seed, &["self_enhance", &it.to_string()]);
        let coder = format!("coder-{it}");
        for (j, s) in samples(it).into_iter().enumerate() {
            let text = match s {
                Sample::Chart {
                    label,
                    spread,
                    vec,
                    fails,
                } => {
                    rules.push(vector(marker(label), vec));
                    rollout_rules(&mut rules, label, spread);
                    fenced(&sample_chart(label, fails).code)
                }
                Sample::Repeat(label) => fenced(&sample_chart(label, false).code),
                Sample::NoCode => "A chart with several panels would be interesting.".into(),
            };
            rules.push(chat(&coder, None, Some(base + j as u64), vec![text]));
        }
    }

    let (mut s3, mut s2, mut s1, mut tr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (m, chart) in dataset_charts().iter().enumerate() {
        qa_rules(
            &mut s3,
            &mut s2,
            &mut s1,
            &mut tr,
            seed,
            chart,
            m * SCRIPTS as usize,
        );
    }
    // later steps' prompts also contain the chart program, so their rules
    // must come before the step-one rules that match on the chart marker
    rules.extend(s3);
    rules.extend(s2);
    rules.extend(s1);
    rules.extend(tr);

    MockScript {
        rules,
        strict: true,
        default_dim: DIM,
        latency_ms: 0,
    }
}

fn endpoint(model: &str, max_parallel: usize) -> EndpointSpec {
    EndpointSpec {
        base_url: "mock://fixture".into(),
        model: model.into(),
        auth_token_env: None,
        max_parallel,
        retry: RetryPolicy::default(),
        timeout_s: 60.0,
        embed_batch_size: 16,
    }
}

pub fn fixture_manifest(worker_cmd: Vec<String>) -> Manifest {
    let endpoints: BTreeMap<String, EndpointSpec> = [
        ("rollout", ROLLOUT_MODEL),
        ("embedder", EMBED_MODEL),
        ("codegen", CODEGEN_MODEL),
        ("coder-1", "coder-1"),
        ("coder-2", "coder-2"),
        ("qa", QA_MODEL),
        ("cot", COT_MODEL),
    ]
    .into_iter()
    .map(|(name, model)| (name.to_string(), endpoint(model, 8)))
    .collect();
    let threshold = ThresholdStage {
        threshold: THRESHOLD,
    };
    Manifest {
        seed: FIXTURE_SEED,
        output_dir: PathBuf::from("out"),
        store_root: None,
        corpus: Some(PathBuf::from("corpus")),
        worker_cmd,
        workers: 4,
        max_parallel: 8,
        canonical_ledger: true,
        mock_script: Some(PathBuf::from("mock.json")),
        prompt_overrides: BTreeMap::new(),
        timeouts: Timeouts {
            render_s: 10.0,
            script_s: 10.0,
        },
        endpoints,
        scoring: Some(ScoringSpec {
            rollout_endpoint: "rollout".into(),
            embed_endpoint: "embedder".into(),
            rollouts: ROLLOUTS,
            sampling: SamplingPreset::ROLLOUT,
            spectrum: SpectrumSource::GramEigenvalues,
            zero_valid: ZeroValidPolicy::SentinelMax,
        }),
        stages: vec![
            StageSpec::Score(ScoreStage {}),
            StageSpec::FilterHard(threshold.clone()),
            StageSpec::ColdStart(ColdStartStage {
                endpoint: "codegen".into(),
                sampling: SamplingPreset::ROLLOUT,
            }),
            StageSpec::ExportCoderSet(EmptyStage {}),
            StageSpec::SelfEnhance(SelfEnhanceStage {
                iterations: 2,
                coder_endpoints: vec!["coder-1".into(), "coder-2".into()],
                samples: SAMPLES,
                sampling: SamplingPreset::CODER,
                thresholds: BoostThresholds {
                    rpe: THRESHOLD,
                    sim: 0.65,
                },
                grow_index: false,
            }),
            StageSpec::Synth(threshold),
            StageSpec::QaSynth(QaSynthStage {
                endpoint: "qa".into(),
                scripts_per_chart: SCRIPTS,
                sampling: SamplingPreset::REASONING,
            }),
            StageSpec::CotDistill(DistillStage {
                endpoint: "cot".into(),
                traces: TRACES,
                sampling: SamplingPreset::REASONING,
            }),
            StageSpec::CotFilter(FilterConfig::default()),
            StageSpec::Bucket(BucketConfig {
                rl_quota: RL_QUOTA,
                sft_traces: 1,
            }),
            StageSpec::Diagnose(DiagnoseStage { sample_size: 1000 }),
        ],
    }
}

/// Corpus image `k`: striped colors plus the chart marker.
pub fn corpus_image(k: usize) -> Vec<u8> {
    let label = format!("c{k:02}");
    render_png(
        &format!("fixture corpus {label}"),
        (64, 48),
        Some(2 + (k % 5) as u32),
        &[marker(&label)],
    )
}

/// Writes `corpus/`, `mock.json` and `manifest.json` under `dir` and returns
/// the manifest path.
pub fn write_fixture(dir: &Path, worker_cmd: Vec<String>) -> Result<PathBuf, PipelineError> {
    for k in 0..CHARTS {
        write_atomic(
            &dir.join("corpus").join(format!("c{k:02}.png")),
            &corpus_image(k),
        )?;
    }
    let manifest = fixture_manifest(worker_cmd);
    write_atomic(
        &dir.join("mock.json"),
        fixture_mock(manifest.seed).to_json_pretty().as_bytes(),
    )?;
    let path = dir.join("manifest.json");
    write_atomic(&path, manifest.to_json_pretty().as_bytes())?;
    Ok(path)
}
