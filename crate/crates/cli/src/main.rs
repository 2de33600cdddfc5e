//! `chartsynth` command-line driver.
//!
//! Exit codes: 0 success, 1 stage or validation failure, 2 configuration or
//! usage error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chartsynth::cot_filter::{filter_trace, FilterConfig};
use chartsynth::pipeline::fixture::write_fixture;
use chartsynth::pipeline::jsonl::{read_jsonl, write_json, write_jsonl};
use chartsynth::pipeline::manifest::SelfEnhanceStage;
use chartsynth::pipeline::{
    plan, validate_dataset, Manifest, PipelineError, RunOptions, Runner, StageReport, StageSpec,
};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(
    name = "chartsynth",
    version,
    about = "Chart corpus synthesis pipeline"
)]
struct Cli {
    /// Override the manifest seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the manifest's per-stage parallelism.
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
    /// Validate the manifest and print the stage plan without running anything.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ManifestArg {
    /// Pipeline manifest (JSON).
    #[arg(short, long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct IterationArgs {
    #[command(flatten)]
    manifest: ManifestArg,
    /// Self-enhancement iteration, starting at 1.
    #[arg(long)]
    iteration: u32,
}

#[derive(Debug, Args)]
struct CotFilterArgs {
    /// Run as a pipeline stage from this manifest.
    #[arg(short, long, conflicts_with_all = ["input", "out"])]
    manifest: Option<PathBuf>,
    /// Standalone mode: trace JSONL with a `text`, `raw_text` or `cot_trace` field.
    #[arg(long, requires = "out")]
    input: Option<PathBuf>,
    /// Standalone mode: directory for passed.jsonl, rejected.jsonl and histogram.json.
    #[arg(long, requires = "input")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = FilterConfig::default().min_words)]
    min_words: usize,
    #[arg(long, default_value_t = FilterConfig::default().ngram)]
    ngram: usize,
    #[arg(long, default_value_t = FilterConfig::default().min_repeats)]
    min_repeats: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute every stage in the manifest, resuming from existing ledgers.
    Run {
        manifest: PathBuf,
        /// Stop dispatching after this many records (simulated interrupt).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score the external corpus.
    Score(ManifestArg),
    FilterHard(ManifestArg),
    ColdStart(ManifestArg),
    ExportCoderSet(ManifestArg),
    /// Sample candidates from the coder endpoints for one iteration.
    CoderSample(IterationArgs),
    /// Filter one iteration's candidates and export the next coder set.
    Boost(IterationArgs),
    Synth(ManifestArg),
    QaSynth(ManifestArg),
    CotDistill(ManifestArg),
    CotFilter(CotFilterArgs),
    Bucket(ManifestArg),
    Diagnose(ManifestArg),
    /// Re-check an emitted dataset against its ground-truth anchors.
    Validate {
        /// Output directory or its bucket/ subdirectory.
        dataset: PathBuf,
        /// Distilled traces per question.
        #[arg(long, default_value_t = 3)]
        traces: u32,
    },
    /// Serve the sandbox worker protocol on stdin/stdout with the stub worker.
    StubWorker,
    /// Write the packaged 20-chart mock fixture.
    Fixture {
        #[arg(long)]
        out: PathBuf,
    },
}

/// `println!` that ignores a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// Failure carrying its exit code.
struct Fail(u8, String);

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        Fail(e.exit_code() as u8, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn options(cli: &Cli) -> RunOptions {
    RunOptions {
        seed: cli.seed,
        max_parallel: cli.max_parallel,
        ..RunOptions::default()
    }
}

/// Loads the manifest; `None` after printing the plan in dry-run mode.
fn load(cli: &Cli, path: &Path) -> Result<Option<Manifest>, Fail> {
    let manifest = Manifest::load(path)?;
    if cli.dry_run {
        for line in plan(&manifest) {
            say!("{line}");
        }
        return Ok(None);
    }
    Ok(Some(manifest))
}

fn print_report(r: &StageReport) {
    let t = &r.tally;
    say!(
        "{:<16} retained {:>4}  dropped {:>4}  emitted {:>4}  failed {:>3}  skipped {:>4}",
        r.stage,
        t.retained,
        t.dropped,
        t.emitted,
        t.failed,
        t.skipped
    );
}

fn finish(report: StageReport) -> Result<u8, Fail> {
    print_report(&report);
    Ok(u8::from(report.tally.failed > 0))
}

fn self_enhance_spec(m: &Manifest) -> Result<SelfEnhanceStage, Fail> {
    m.stages
        .iter()
        .find_map(|s| match s {
            StageSpec::SelfEnhance(s) => Some(s.clone()),
            _ => None,
        })
        .ok_or_else(|| Fail(2, "manifest has no self_enhance stage".into()))
}

fn dispatch(cli: &Cli) -> Result<u8, Fail> {
    let stage = |args: &ManifestArg, name: &str| -> Result<u8, Fail> {
        let Some(m) = load(cli, &args.manifest)? else {
            return Ok(0);
        };
        finish(Runner::new(m, options(cli))?.run_named(name)?)
    };
    match &cli.command {
        Command::Run {
            manifest,
            stop_after,
        } => {
            let Some(m) = load(cli, manifest)? else {
                return Ok(0);
            };
            let opts = RunOptions {
                stop_after: *stop_after,
                ..options(cli)
            };
            let summary = Runner::new(m, opts)?.run()?;
            summary.stages.iter().for_each(print_report);
            let failed = summary.failed();
            if failed > 0 {
                eprintln!("{failed} record(s) failed; rerun to retry them");
            }
            Ok(u8::from(failed > 0))
        }
        Command::Score(a) => stage(a, "score"),
        Command::FilterHard(a) => stage(a, "filter_hard"),
        Command::ColdStart(a) => stage(a, "cold_start"),
        Command::ExportCoderSet(a) => stage(a, "export_coder_set"),
        Command::CoderSample(a) | Command::Boost(a) => {
            let Some(m) = load(cli, &a.manifest.manifest)? else {
                return Ok(0);
            };
            let spec = self_enhance_spec(&m)?;
            if a.iteration == 0 || a.iteration > spec.iterations {
                return Err(Fail(
                    2,
                    format!("iteration must be in 1..={}", spec.iterations),
                ));
            }
            let runner = Runner::new(m, options(cli))?;
            let report = if matches!(cli.command, Command::CoderSample(_)) {
                runner.coder_sample(&spec, a.iteration)?
            } else {
                runner.boost(&spec, a.iteration)?
            };
            finish(report)
        }
        Command::Synth(a) => stage(a, "synth"),
        Command::QaSynth(a) => stage(a, "qa_synth"),
        Command::CotDistill(a) => stage(a, "cot_distill"),
        Command::CotFilter(a) => match (&a.manifest, &a.input, &a.out) {
            (Some(m), _, _) => stage(
                &ManifestArg {
                    manifest: m.clone(),
                },
                "cot_filter",
            ),
            (None, Some(input), Some(out)) => {
                let cfg = FilterConfig {
                    min_words: a.min_words,
                    ngram: a.ngram,
                    min_repeats: a.min_repeats,
                };
                if cfg.ngram == 0 {
                    return Err(Fail(2, "--ngram must be at least 1".into()));
                }
                if cli.dry_run {
                    say!("filter {} into {}", input.display(), out.display());
                    return Ok(0);
                }
                filter_file(input, out, &cfg)
            }
            _ => Err(Fail(
                2,
                "cot-filter needs --manifest or --input with --out".into(),
            )),
        },
        Command::Bucket(a) => stage(a, "bucket"),
        Command::Diagnose(a) => stage(a, "diagnose"),
        Command::Validate { dataset, traces } => {
            let violations = validate_dataset(dataset, *traces)?;
            for v in &violations {
                say!("{v}");
            }
            if violations.is_empty() {
                say!("ok: no anchor violations");
                Ok(0)
            } else {
                eprintln!("{} violation(s)", violations.len());
                Ok(1)
            }
        }
        Command::StubWorker => {
            chartsynth::broker::stub::run_stdio().map_err(|e| Fail(1, e.to_string()))?;
            Ok(0)
        }
        Command::Fixture { out } => {
            let exe = std::env::current_exe().map_err(|e| Fail(1, e.to_string()))?;
            let worker = vec![exe.display().to_string(), "stub-worker".to_string()];
            let manifest = write_fixture(out, worker)?;
            say!("{}", manifest.display());
            Ok(0)
        }
    }
}

/// Standalone trace filter over an arbitrary JSONL file.
fn filter_file(input: &Path, out: &Path, cfg: &FilterConfig) -> Result<u8, Fail> {
    let lines: Vec<Value> = read_jsonl(input)?;
    let mut passed = Vec::new();
    let mut rejected = Vec::new();
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in lines.into_iter().enumerate() {
        let text = ["text", "raw_text", "cot_trace"]
            .iter()
            .find_map(|k| line.get(k).and_then(Value::as_str))
            .ok_or_else(|| {
                Fail(
                    2,
                    format!(
                        "{}:{}: no text, raw_text or cot_trace field",
                        input.display(),
                        i + 1
                    ),
                )
            })?;
        let verdict = filter_trace(text, cfg);
        if verdict.passed {
            passed.push(line);
        } else {
            for f in &verdict.failures {
                *histogram.entry(f.rule.to_string()).or_default() += 1;
            }
            rejected.push(serde_json::json!({ "record": line, "failures": verdict.failures }));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    write_jsonl(&out.join("passed.jsonl"), &passed)?;
    write_jsonl(&out.join("rejected.jsonl"), &rejected)?;
    write_json(&out.join("histogram.json"), &histogram)?;
    say!("passed {}  rejected {}", passed.len(), rejected.len());
    for (rule, n) in &histogram {
        say!("  {rule:<10} {n}");
    }
    Ok(0)
}
