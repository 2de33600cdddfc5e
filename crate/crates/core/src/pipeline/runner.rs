//! Stage execution.
//!
//! Every stage reads the files written by the stages it depends on, runs
//! its per-record work through the ledger-backed executor, and rebuilds its
//! output files from the ledger in input order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::executor::{run_items, Budget, Outcome, Tally};
use super::jsonl::{read_json, read_jsonl, write_atomic, write_json, write_jsonl};
use super::ledger::{Action, Ledger};
use super::manifest::{
    ColdStartStage, DiagnoseStage, DistillStage, Manifest, QaSynthStage, SelfEnhanceStage,
    StageSpec, ThresholdStage,
};
use super::{derive_seed, PipelineError};
use crate::answer::NormalizedMatch;
use crate::broker::Broker;
use crate::cot_filter::{filter_trace, FilterConfig, Rule};
use crate::diagnostics::{
    build_report, comparison_table, embeddings_csv, CorpusItem, ReportConfig,
};
use crate::forge::{
    self, boost_one, cold_start_one, ensure_scored, export_coder_training_set, sample_one,
    score_image, ChartRecord, ForgeContext, ForgeError, HardSeedIndex, Kept, RolloutStatus,
    ScoringConfig,
};
use crate::gateway::{Gateway, MockBackend, MockScript, RoutingTransport};
use crate::prompts::PromptCatalog;
use crate::qa::{
    self, distill_traces, fail_rate, synthesize_candidate, BucketConfig, QaCandidate, QaContext,
    QaError, SynthInput, SynthOutcome,
};
use crate::rpe::RpeConfig;
use crate::store::ContentStore;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Mock backend to serve `mock:` endpoints; overrides `mock_script`.
    pub mock: Option<Arc<MockBackend>>,
    /// Stop dispatching after this many records (interrupt simulation).
    pub stop_after: Option<usize>,
    pub seed: Option<u64>,
    pub max_parallel: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub tally: Tally,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub stages: Vec<StageReport>,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.stages.iter().map(|s| s.tally.failed).sum()
    }
}

/// Score-stage ledger payload: the record plus every rollout status.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Scored {
    record: ChartRecord,
    rollouts: Vec<RolloutStatus>,
}

/// A deduplicated coder sample awaiting the boost filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub chart_id: String,
    pub sample_index: u32,
    pub code: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sampled {
    code: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BucketTag {
    bucket: qa::Bucket,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub threshold: f64,
    pub input_count: usize,
    pub retained: usize,
    pub dropped: usize,
    pub failed: usize,
    pub by_source: BTreeMap<String, usize>,
    pub records: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub candidates: usize,
    pub traces: usize,
    pub passed: usize,
    pub rejected: usize,
    /// Traces failing each rule; one trace can fail several.
    pub by_rule: BTreeMap<String, usize>,
}

pub struct Runner {
    manifest: Manifest,
    seed: u64,
    parallel: usize,
    gateway: Gateway,
    prompts: PromptCatalog,
    store: ContentStore,
    broker: Mutex<Option<Arc<Broker>>>,
    budget: Budget,
    matcher: NormalizedMatch,
}

fn stage_dir(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn record_level(e: ForgeError) -> Result<Outcome, PipelineError> {
    if e.is_record_level() {
        Ok(Outcome::Failed {
            cause: e.to_string(),
        })
    } else {
        Err(e.into())
    }
}

fn qa_record_level(e: QaError) -> Result<Outcome, PipelineError> {
    match e {
        QaError::Gateway(g) if g.is_transport() => Ok(Outcome::Failed {
            cause: g.to_string(),
        }),
        e => Err(e.into()),
    }
}

fn decode<T: DeserializeOwned>(
    ledger: &Ledger,
    id: &str,
    v: &serde_json::Value,
) -> Result<T, PipelineError> {
    serde_json::from_value(v.clone()).map_err(|e| {
        PipelineError::Integrity(format!("{}: record {id}: {e}", ledger.path().display()))
    })
}

/// Payloads of terminal entries with one of `actions`, in item order.
fn collect<T: DeserializeOwned, I>(
    ledger: &Ledger,
    items: &[(String, I)],
    actions: &[Action],
) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (id, _) in items {
        let Some(entry) = ledger.terminal(id) else {
            continue;
        };
        if !actions.contains(&entry.action) {
            continue;
        }
        if let Some(data) = &entry.data {
            out.push(decode(ledger, id, data)?);
        }
    }
    Ok(out)
}

fn dedup_keep_first(records: Vec<ChartRecord>) -> Vec<ChartRecord> {
    let mut seen = BTreeSet::new();
    records
        .into_iter()
        .filter(|r| seen.insert(r.chart_id.clone()))
        .collect()
}

/// Human-readable stage plan for `--dry-run`.
pub fn plan(manifest: &Manifest) -> Vec<String> {
    let out = &manifest.output_dir;
    let mut lines = vec![format!("output: {}", out.display())];
    for (i, stage) in manifest.stages.iter().enumerate() {
        let detail = match stage {
            StageSpec::Score(_) => {
                let s = manifest.scoring.as_ref().expect("validated");
                format!(
                    "{} rollouts on {}, embeddings from {}",
                    s.rollouts, s.rollout_endpoint, s.embed_endpoint
                )
            }
            StageSpec::FilterHard(t) | StageSpec::Synth(t) => format!("threshold {}", t.threshold),
            StageSpec::ColdStart(c) => format!("code generation on {}", c.endpoint),
            StageSpec::ExportCoderSet(_) => "coder_set/iter0.jsonl".into(),
            StageSpec::SelfEnhance(s) => format!(
                "{} iteration(s) × {} samples from {:?}, rpe ≥ {}, sim ≤ {}",
                s.iterations, s.samples, s.coder_endpoints, s.thresholds.rpe, s.thresholds.sim
            ),
            StageSpec::QaSynth(q) => format!(
                "{} script(s) per chart on {}",
                q.scripts_per_chart, q.endpoint
            ),
            StageSpec::CotDistill(d) => {
                format!("{} trace(s) per question on {}", d.traces, d.endpoint)
            }
            StageSpec::CotFilter(f) => format!(
                "min {} words, {}-gram repeated ≥ {}",
                f.min_words, f.ngram, f.min_repeats
            ),
            StageSpec::Bucket(b) => {
                format!("rl quota {}, {} sft trace(s)", b.rl_quota, b.sft_traces)
            }
            StageSpec::Diagnose(d) => format!("sample size {}", d.sample_size),
        };
        lines.push(format!("{:>2}. {:<16} {}", i + 1, stage.name(), detail));
    }
    lines
}

impl Runner {
    pub fn new(manifest: Manifest, opts: RunOptions) -> Result<Self, PipelineError> {
        let mock = match (opts.mock, &manifest.mock_script) {
            (Some(m), _) => Some(m),
            (None, Some(path)) => Some(Arc::new(MockBackend::new(
                MockScript::load(path).map_err(PipelineError::Config)?,
            ))),
            (None, None) => None,
        };
        if mock.is_none() {
            if let Some((name, _)) = manifest
                .endpoints
                .iter()
                .find(|(_, e)| e.base_url.starts_with("mock:"))
            {
                return Err(PipelineError::Config(format!(
                    "endpoint {name:?} is a mock endpoint but no mock_script is configured"
                )));
            }
        }
        for name in manifest.endpoints.keys() {
            let cfg = manifest.endpoint(name)?;
            cfg.validate()
                .map_err(|e| PipelineError::Config(format!("endpoint {name:?}: {e}")))?;
        }
        let mut prompts = PromptCatalog::packaged();
        for (kind, path) in &manifest.prompt_overrides {
            prompts
                .load_override(*kind, path)
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        let store_root = manifest.store_root();
        let store =
            ContentStore::open(&store_root).map_err(|e| PipelineError::io(&store_root, e))?;
        let gateway = Gateway::new(Arc::new(RoutingTransport::new(mock)));
        Ok(Self {
            seed: opts.seed.unwrap_or(manifest.seed),
            parallel: opts.max_parallel.unwrap_or(manifest.max_parallel).max(1),
            budget: opts
                .stop_after
                .map_or_else(Budget::unlimited, Budget::limited),
            manifest,
            gateway,
            prompts,
            store,
            broker: Mutex::new(None),
            matcher: NormalizedMatch,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    fn out(&self) -> &Path {
        &self.manifest.output_dir
    }

    fn broker(&self) -> Result<Arc<Broker>, PipelineError> {
        let mut slot = self.broker.lock().unwrap();
        if let Some(b) = slot.as_ref() {
            return Ok(b.clone());
        }
        let b = Arc::new(Broker::start(
            self.manifest.worker_cmd.clone(),
            self.manifest.workers,
        )?);
        *slot = Some(b.clone());
        Ok(b)
    }

    fn scoring(&self) -> Result<ScoringConfig, PipelineError> {
        let s =
            self.manifest.scoring.as_ref().ok_or_else(|| {
                PipelineError::Config("this stage needs a `scoring` section".into())
            })?;
        Ok(ScoringConfig {
            rollout_endpoint: self.manifest.endpoint(&s.rollout_endpoint)?,
            embed_endpoint: self.manifest.endpoint(&s.embed_endpoint)?,
            rollouts: s.rollouts,
            sampling: s.sampling,
            rpe: RpeConfig {
                spectrum: s.spectrum,
                zero_valid: s.zero_valid,
            },
        })
    }

    fn forge_ctx<'a>(&'a self, broker: &'a Broker) -> ForgeContext<'a> {
        ForgeContext {
            gateway: &self.gateway,
            broker,
            prompts: &self.prompts,
            store: &self.store,
            render_timeout_s: self.manifest.timeouts.render_s,
        }
    }

    fn qa_ctx<'a>(&'a self, broker: &'a Broker) -> QaContext<'a> {
        QaContext {
            gateway: &self.gateway,
            broker,
            prompts: &self.prompts,
            matcher: &self.matcher,
            script_timeout_s: self.manifest.timeouts.script_s,
        }
    }

    fn ledger(&self, dir: &Path, stage: &str) -> Result<Ledger, PipelineError> {
        Ledger::open(
            &dir.join("ledger.jsonl"),
            stage,
            self.manifest.canonical_ledger,
        )
    }

    fn input<T: DeserializeOwned>(
        &self,
        stage: &str,
        needs: &str,
        path: PathBuf,
    ) -> Result<Vec<T>, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput {
                stage: stage.into(),
                needs: needs.into(),
                path,
            });
        }
        read_jsonl(&path)
    }

    fn stage_spec(&self, name: &str) -> Option<&StageSpec> {
        self.manifest.stages.iter().find(|s| s.name() == name)
    }

    /// Runs every manifest stage in order.
    pub fn run(&self) -> Result<RunSummary, PipelineError> {
        let mut summary = RunSummary::default();
        for stage in &self.manifest.stages {
            log::info!("stage {}", stage.name());
            let report = self.run_stage(stage)?;
            log::info!("stage {} done: {:?}", report.stage, report.tally);
            summary.stages.push(report);
        }
        Ok(summary)
    }

    /// Runs the manifest's configuration of the named stage.
    pub fn run_named(&self, name: &str) -> Result<StageReport, PipelineError> {
        let spec = self
            .stage_spec(name)
            .ok_or_else(|| PipelineError::Config(format!("manifest has no {name} stage")))?
            .clone();
        self.run_stage(&spec)
    }

    pub fn run_stage(&self, stage: &StageSpec) -> Result<StageReport, PipelineError> {
        match stage {
            StageSpec::Score(_) => self.score(),
            StageSpec::FilterHard(t) => self.filter_hard(t),
            StageSpec::ColdStart(c) => self.cold_start(c),
            StageSpec::ExportCoderSet(_) => self.export_coder_set(),
            StageSpec::SelfEnhance(s) => self.self_enhance(s),
            StageSpec::Synth(t) => self.synth(t),
            StageSpec::QaSynth(q) => self.qa_synth(q),
            StageSpec::CotDistill(d) => self.cot_distill(d),
            StageSpec::CotFilter(f) => self.cot_filter(f),
            StageSpec::Bucket(b) => self.bucket(b),
            StageSpec::Diagnose(d) => self.diagnose(d),
        }
    }

    fn corpus_images(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let dir = self
            .manifest
            .corpus
            .as_ref()
            .ok_or_else(|| PipelineError::Config("the score stage needs `corpus`".into()))?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| PipelineError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        Ok(files)
    }

    pub fn score(&self) -> Result<StageReport, PipelineError> {
        let dir = stage_dir(self.out(), "score");
        let mut ledger = self.ledger(&dir, "score")?;
        let mut items: Vec<(String, String)> = Vec::new();
        let mut seen = BTreeSet::new();
        for path in self.corpus_images()? {
            let bytes = std::fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
            let key = self
                .store
                .put(&bytes)
                .map_err(|e| PipelineError::io(self.store.root(), e))?;
            if seen.insert(key.clone()) {
                items.push((key.clone(), key));
            }
        }
        let tally = if items.iter().all(|(id, _)| ledger.terminal(id).is_some()) {
            Tally {
                skipped: items.len(),
                ..Tally::default()
            }
        } else {
            let scoring = self.scoring()?;
            let broker = self.broker()?;
            let ctx = self.forge_ctx(&broker);
            run_items(&mut ledger, &items, self.parallel, &self.budget, |key| {
                let image = self
                    .store
                    .get(key)
                    .map_err(|e| PipelineError::io(self.store.root(), e))?;
                let seed = derive_seed(self.seed, &["score", key]);
                match score_image(&ctx, &scoring, &image, seed) {
                    Ok(o) => {
                        let mut record = ChartRecord::external(key.clone());
                        let scored = |record| Scored {
                            record,
                            rollouts: o.rollouts.clone(),
                        };
                        Ok(match o.score {
                            Some(score) => {
                                record.rpe = Some(score);
                                record.embedding = Some(o.image_embedding.clone());
                                Outcome::retained(&scored(record))
                            }
                            None => Outcome::dropped_with("zero_valid", &scored(record)),
                        })
                    }
                    Err(e) => record_level(e),
                }
            })?
        };
        let scored: Vec<Scored> = collect(&ledger, &items, &[Action::Retained])?;
        let records: Vec<ChartRecord> = scored.into_iter().map(|s| s.record).collect();
        let path = dir.join("records.jsonl");
        write_jsonl(&path, &records)?;
        Ok(report("score", tally, vec![path]))
    }

    pub fn filter_hard(&self, spec: &ThresholdStage) -> Result<StageReport, PipelineError> {
        let records: Vec<ChartRecord> = self.input(
            "filter_hard",
            "score",
            stage_dir(self.out(), "score").join("records.jsonl"),
        )?;
        let (kept, _) = forge::filter_hard(&records, spec.threshold)?;
        let kept_ids: BTreeSet<&str> = kept.iter().map(|r| r.chart_id.as_str()).collect();
        let dir = stage_dir(self.out(), "filter_hard");
        let mut ledger = self.ledger(&dir, "filter_hard")?;
        let items: Vec<(String, ChartRecord)> = records
            .iter()
            .map(|r| (r.chart_id.clone(), r.clone()))
            .collect();
        let tally = run_items(&mut ledger, &items, 1, &Budget::unlimited(), |r| {
            Ok(if kept_ids.contains(r.chart_id.as_str()) {
                Outcome::retained(r)
            } else {
                Outcome::dropped("rpe_below_threshold")
            })
        })?;
        let hard: Vec<ChartRecord> = collect(&ledger, &items, &[Action::Retained])?;
        let index = HardSeedIndex::from_records(&hard)?;
        let hard_path = dir.join("hard.jsonl");
        let index_path = dir.join("index.json");
        write_jsonl(&hard_path, &hard)?;
        write_json(&index_path, &index)?;
        Ok(report("filter_hard", tally, vec![hard_path, index_path]))
    }

    pub fn cold_start(&self, spec: &ColdStartStage) -> Result<StageReport, PipelineError> {
        let hard: Vec<ChartRecord> = self.input(
            "cold_start",
            "filter_hard",
            stage_dir(self.out(), "filter_hard").join("hard.jsonl"),
        )?;
        let dir = stage_dir(self.out(), "cold_start");
        let mut ledger = self.ledger(&dir, "cold_start")?;
        let items: Vec<(String, ChartRecord)> =
            hard.into_iter().map(|r| (r.chart_id.clone(), r)).collect();
        let tally = if items.iter().all(|(id, _)| ledger.terminal(id).is_some()) {
            Tally {
                skipped: items.len(),
                ..Tally::default()
            }
        } else {
            let endpoint = self.manifest.endpoint(&spec.endpoint)?;
            let broker = self.broker()?;
            let ctx = self.forge_ctx(&broker);
            run_items(&mut ledger, &items, self.parallel, &self.budget, |r| {
                let image = self
                    .store
                    .get(&r.image_ref)
                    .map_err(|e| PipelineError::io(self.store.root(), e))?;
                let seed = derive_seed(self.seed, &["cold_start", &r.chart_id]);
                match cold_start_one(&ctx, &endpoint, spec.sampling, &image, seed) {
                    Ok(Kept::Yes(rec)) => Ok(Outcome::retained(&rec)),
                    Ok(Kept::No { cause }) => Ok(Outcome::dropped(cause)),
                    Err(e) => record_level(e),
                }
            })?
        };
        let cold = dedup_keep_first(collect(&ledger, &items, &[Action::Retained])?);
        let path = dir.join("records.jsonl");
        write_jsonl(&path, &cold)?;
        Ok(report("cold_start", tally, vec![path]))
    }

    fn cold_records(&self, stage: &str) -> Result<Vec<ChartRecord>, PipelineError> {
        self.input(
            stage,
            "cold_start",
            stage_dir(self.out(), "cold_start").join("records.jsonl"),
        )
    }

    fn write_coder_set(
        &self,
        iteration: u32,
        records: &[ChartRecord],
    ) -> Result<PathBuf, PipelineError> {
        let path = self
            .out()
            .join("coder_set")
            .join(format!("iter{iteration}.jsonl"));
        let mut buf = Vec::new();
        export_coder_training_set(records, &self.prompts, &mut buf)
            .map_err(|e| PipelineError::io(&path, e))?;
        write_atomic(&path, &buf)?;
        Ok(path)
    }

    pub fn export_coder_set(&self) -> Result<StageReport, PipelineError> {
        let cold = self.cold_records("export_coder_set")?;
        let path = self.write_coder_set(0, &cold)?;
        let tally = Tally {
            emitted: cold.iter().filter(|r| r.code.is_some()).count(),
            ..Tally::default()
        };
        Ok(report("export_coder_set", tally, vec![path]))
    }

    fn self_enhance_spec(&self) -> Result<SelfEnhanceStage, PipelineError> {
        match self.stage_spec("self_enhance") {
            Some(StageSpec::SelfEnhance(s)) => Ok(s.clone()),
            _ => Err(PipelineError::Config(
                "manifest has no self_enhance stage".into(),
            )),
        }
    }

    fn iter_dir(&self, iteration: u32) -> PathBuf {
        self.out()
            .join("self_enhance")
            .join(format!("iter{iteration}"))
    }

    fn boosted(&self, iteration: u32, stage: &str) -> Result<Vec<ChartRecord>, PipelineError> {
        self.input(
            stage,
            &format!("boost for iteration {iteration}"),
            self.iter_dir(iteration).join("boost").join("boosted.jsonl"),
        )
    }

    /// Chart ids that later samples must not repeat: the cold-start set plus
    /// all earlier iterations' candidates.
    fn known_ids(&self, iteration: u32) -> Result<BTreeSet<String>, PipelineError> {
        let mut known: BTreeSet<String> = self
            .cold_records("coder_sample")?
            .into_iter()
            .map(|r| r.chart_id)
            .collect();
        for i in 1..iteration {
            let path = self.iter_dir(i).join("sample").join("candidates.jsonl");
            let cands: Vec<Candidate> = self.input(
                "coder_sample",
                &format!("coder-sample for iteration {i}"),
                path,
            )?;
            known.extend(cands.into_iter().map(|c| c.chart_id));
        }
        Ok(known)
    }

    /// Draws coder samples for one self-enhancement iteration.
    pub fn coder_sample(
        &self,
        spec: &SelfEnhanceStage,
        iteration: u32,
    ) -> Result<StageReport, PipelineError> {
        let known = self.known_ids(iteration)?;
        let name =
            &spec.coder_endpoints[(iteration as usize - 1).min(spec.coder_endpoints.len() - 1)];
        let dir = self.iter_dir(iteration).join("sample");
        let mut ledger = self.ledger(&dir, "coder_sample")?;
        let items: Vec<(String, u32)> = (0..spec.samples)
            .map(|j| (format!("sample-{j:05}"), j))
            .collect();
        let base = derive_seed(self.seed, &["self_enhance", &iteration.to_string()]);
        let tally = if items.iter().all(|(id, _)| ledger.terminal(id).is_some()) {
            Tally {
                skipped: items.len(),
                ..Tally::default()
            }
        } else {
            let endpoint = self.manifest.endpoint(name)?;
            let broker = self.broker()?;
            let ctx = self.forge_ctx(&broker);
            run_items(
                &mut ledger,
                &items,
                self.parallel,
                &self.budget,
                |j| match sample_one(&ctx, &endpoint, spec.sampling, base.wrapping_add(*j as u64)) {
                    Ok(Some(code)) => Ok(Outcome::emitted(&Sampled { code })),
                    Ok(None) => Ok(Outcome::dropped("no_code")),
                    Err(e) => record_level(e),
                },
            )?
        };
        let mut seen = known;
        let mut candidates = Vec::new();
        for (id, j) in &items {
            let Some(entry) = ledger.terminal(id) else {
                continue;
            };
            let (Action::Emitted, Some(data)) = (entry.action, &entry.data) else {
                continue;
            };
            let s: Sampled = decode(&ledger, id, data)?;
            let chart_id = crate::store::digest_hex(s.code.as_bytes());
            if seen.insert(chart_id.clone()) {
                candidates.push(Candidate {
                    chart_id,
                    sample_index: *j,
                    code: s.code,
                });
            } else {
                log::info!("iteration {iteration}: {id} duplicates chart {chart_id}");
            }
        }
        let path = dir.join("candidates.jsonl");
        write_jsonl(&path, &candidates)?;
        Ok(report(
            &format!("coder_sample/iter{iteration}"),
            tally,
            vec![path],
        ))
    }

    /// Filters one iteration's candidates by complexity and novelty.
    pub fn boost(
        &self,
        spec: &SelfEnhanceStage,
        iteration: u32,
    ) -> Result<StageReport, PipelineError> {
        let stage = "boost";
        let candidates: Vec<Candidate> = self.input(
            stage,
            &format!("coder-sample for iteration {iteration}"),
            self.iter_dir(iteration)
                .join("sample")
                .join("candidates.jsonl"),
        )?;
        let index_path = stage_dir(self.out(), "filter_hard").join("index.json");
        if !index_path.exists() {
            return Err(PipelineError::MissingInput {
                stage: stage.into(),
                needs: "filter_hard".into(),
                path: index_path,
            });
        }
        let mut index: HardSeedIndex = read_json(&index_path)?;
        if spec.grow_index {
            for i in 1..iteration {
                for r in self.boosted(i, stage)? {
                    let emb = r
                        .embedding
                        .ok_or_else(|| ForgeError::Unembedded(vec![r.chart_id.clone()]))?;
                    index.insert(r.chart_id, emb.values)?;
                }
            }
        }
        let dir = self.iter_dir(iteration).join("boost");
        let mut ledger = self.ledger(&dir, stage)?;
        let items: Vec<(String, Candidate)> = candidates
            .into_iter()
            .map(|c| (c.chart_id.clone(), c))
            .collect();
        let tally = if items.iter().all(|(id, _)| ledger.terminal(id).is_some()) {
            Tally {
                skipped: items.len(),
                ..Tally::default()
            }
        } else {
            let scoring = self.scoring()?;
            let broker = self.broker()?;
            let ctx = self.forge_ctx(&broker);
            run_items(&mut ledger, &items, self.parallel, &self.budget, |c| {
                let seed = derive_seed(self.seed, &["boost", &c.chart_id]);
                match boost_one(
                    &ctx,
                    &scoring,
                    &index,
                    &spec.thresholds,
                    &c.code,
                    iteration,
                    seed,
                ) {
                    Ok(Kept::Yes(rec)) => Ok(Outcome::retained(&rec)),
                    Ok(Kept::No { cause }) => Ok(Outcome::dropped(cause)),
                    Err(e) => record_level(e),
                }
            })?
        };
        let boosted: Vec<ChartRecord> = collect(&ledger, &items, &[Action::Retained])?;
        let path = dir.join("boosted.jsonl");
        write_jsonl(&path, &boosted)?;

        let mut pool = self.cold_records(stage)?;
        for i in 1..=iteration {
            pool.extend(if i == iteration {
                boosted.clone()
            } else {
                self.boosted(i, stage)?
            });
        }
        let coder_set = self.write_coder_set(iteration, &pool)?;
        Ok(report(
            &format!("boost/iter{iteration}"),
            tally,
            vec![path, coder_set],
        ))
    }

    pub fn self_enhance(&self, spec: &SelfEnhanceStage) -> Result<StageReport, PipelineError> {
        let mut tally = Tally::default();
        let mut outputs = Vec::new();
        for i in 1..=spec.iterations {
            for r in [self.coder_sample(spec, i)?, self.boost(spec, i)?] {
                tally.add(&r.tally);
                outputs.extend(r.outputs);
            }
        }
        Ok(report("self_enhance", tally, outputs))
    }

    fn synth_pool(&self) -> Result<Vec<ChartRecord>, PipelineError> {
        let mut pool = if self.stage_spec("cold_start").is_some()
            || stage_dir(self.out(), "cold_start").exists()
        {
            self.cold_records("synth")?
        } else {
            Vec::new()
        };
        if let Ok(spec) = self.self_enhance_spec() {
            for i in 1..=spec.iterations {
                pool.extend(self.boosted(i, "synth")?);
            }
        }
        Ok(dedup_keep_first(pool))
    }

    pub fn synth(&self, spec: &ThresholdStage) -> Result<StageReport, PipelineError> {
        let pool = self.synth_pool()?;
        let dir = stage_dir(self.out(), "synth");
        let mut ledger = self.ledger(&dir, "synth")?;
        let items: Vec<(String, ChartRecord)> =
            pool.into_iter().map(|r| (r.chart_id.clone(), r)).collect();
        let all_scored = items
            .iter()
            .all(|(_, r)| r.rpe.is_some() && r.embedding.is_some());
        let tally = if items.iter().all(|(id, _)| ledger.terminal(id).is_some()) {
            Tally {
                skipped: items.len(),
                ..Tally::default()
            }
        } else {
            let services = if all_scored {
                None
            } else {
                Some((self.scoring()?, self.broker()?))
            };
            let ctx = services.as_ref().map(|(_, b)| self.forge_ctx(b));
            run_items(&mut ledger, &items, self.parallel, &self.budget, |r| {
                let scored = match (&services, &ctx) {
                    (Some((scoring, _)), Some(ctx)) => {
                        let seed = derive_seed(self.seed, &["synth", &r.chart_id]);
                        match ensure_scored(ctx, scoring, r, seed) {
                            Ok(s) => s,
                            Err(e) => return record_level(e),
                        }
                    }
                    _ => Some(r.clone()),
                };
                Ok(match scored {
                    None => Outcome::dropped("zero_valid"),
                    Some(rec) if rec.rpe.expect("scored").value.at_least(spec.threshold) => {
                        Outcome::retained(&rec)
                    }
                    Some(rec) => Outcome::dropped_with("rpe_below_threshold", &rec),
                })
            })?
        };
        let dataset: Vec<ChartRecord> = collect(&ledger, &items, &[Action::Retained])?;
        let mut by_source = BTreeMap::new();
        for r in &dataset {
            let key = serde_json::to_value(r.source).expect("source serializes");
            *by_source
                .entry(key.as_str().unwrap_or_default().to_string())
                .or_insert(0) += 1;
        }
        let dropped = items
            .iter()
            .filter(|(id, _)| {
                ledger
                    .terminal(id)
                    .is_some_and(|e| e.action == Action::Dropped)
            })
            .count();
        let manifest = SynthManifest {
            threshold: spec.threshold,
            input_count: items.len(),
            retained: dataset.len(),
            dropped,
            failed: items.len() - dataset.len() - dropped,
            by_source,
            records: "dataset.jsonl".into(),
        };
        let data_path = dir.join("dataset.jsonl");
        let manifest_path = dir.join("manifest.json");
        write_jsonl(&data_path, &dataset)?;
        write_json(&manifest_path, &manifest)?;
        Ok(report("synth", tally, vec![data_path, manifest_path]))
    }

    pub fn qa_synth(&self, spec: &QaSynthStage) -> Result<StageReport, PipelineError> {
        let dataset: Vec<ChartRecord> = self.input(
            "qa_synth",
            "synth",
            stage_dir(self.out(), "synth").join("dataset.jsonl"),
        )?;
        let dir = stage_dir(self.out(), "qa_synth");
        let mut ledger = self.ledger(&dir, "qa_synth")?;
        let mut items: Vec<(String, (ChartRecord, u32))> = Vec::new();
        for r in dataset.iter().filter(|r| r.code.is_some()) {
            for i in 0..spec.scripts_per_chart {
                items.push((qa::qa_id(&r.chart_id, i), (r.clone(), i)));
            }
        }
        let tally = if items.iter().all(|(id, _)| ledger.terminal(id).is_some()) {
            Tally {
                skipped: items.len(),
                ..Tally::default()
            }
        } else {
            let endpoint = self.manifest.endpoint(&spec.endpoint)?;
            let broker = self.broker()?;
            let ctx = self.qa_ctx(&broker);
            run_items(
                &mut ledger,
                &items,
                self.parallel,
                &self.budget,
                |(r, i)| {
                    let input = SynthInput {
                        chart_id: &r.chart_id,
                        image_ref: &r.image_ref,
                        chart_code: r.code.as_deref().expect("filtered"),
                        script_index: *i,
                        seed: derive_seed(self.seed, &["qa_synth", &r.chart_id])
                            .wrapping_add(*i as u64),
                    };
                    match synthesize_candidate(&ctx, &endpoint, spec.sampling, &input) {
                        Ok(SynthOutcome::Consistent(c)) => Ok(Outcome::retained(&c)),
                        Ok(SynthOutcome::Rejected {
                            cause,
                            partial: Some(c),
                        }) => Ok(Outcome::dropped_with(cause, &c)),
                        Ok(SynthOutcome::Rejected {
                            cause,
                            partial: None,
                        }) => Ok(Outcome::dropped(cause)),
                        Err(e) => qa_record_level(e),
                    }
                },
            )?
        };
        let candidates: Vec<QaCandidate> =
            collect(&ledger, &items, &[Action::Retained, Action::Dropped])?;
        let path = dir.join("candidates.jsonl");
        write_jsonl(&path, &candidates)?;
        Ok(report("qa_synth", tally, vec![path]))
    }

    pub fn cot_distill(&self, spec: &DistillStage) -> Result<StageReport, PipelineError> {
        let candidates: Vec<QaCandidate> = self.input(
            "cot_distill",
            "qa_synth",
            stage_dir(self.out(), "qa_synth").join("candidates.jsonl"),
        )?;
        let dir = stage_dir(self.out(), "cot_distill");
        let mut ledger = self.ledger(&dir, "cot_distill")?;
        let items: Vec<(String, QaCandidate)> = candidates
            .into_iter()
            .map(|c| (c.qa_id.clone(), c))
            .collect();
        let needs_model = items
            .iter()
            .any(|(id, c)| c.consistent && ledger.terminal(id).is_none());
        let tally = if !needs_model {
            run_items(&mut ledger, &items, 1, &self.budget, |c| {
                Ok(Outcome::emitted(c))
            })?
        } else {
            let endpoint = self.manifest.endpoint(&spec.endpoint)?;
            let broker = self.broker()?;
            let ctx = self.qa_ctx(&broker);
            run_items(&mut ledger, &items, self.parallel, &self.budget, |c| {
                if !c.consistent {
                    return Ok(Outcome::emitted(c));
                }
                let image = self
                    .store
                    .get(&c.image_ref)
                    .map_err(|e| PipelineError::io(self.store.root(), e))?;
                let seed = derive_seed(self.seed, &["cot_distill", &c.qa_id]);
                let traces = match distill_traces(
                    &ctx,
                    &endpoint,
                    spec.sampling,
                    &image,
                    &c.question,
                    &c.answer_py,
                    spec.traces,
                    seed,
                ) {
                    Ok(t) => t,
                    Err(e) => return qa_record_level(e),
                };
                let mut c = c.clone();
                c.fail_rate = Some(fail_rate(&traces, spec.traces as usize)?);
                c.traces = traces;
                Ok(Outcome::retained(&c))
            })?
        };
        let out: Vec<QaCandidate> = collect(&ledger, &items, &[Action::Retained, Action::Emitted])?;
        let path = dir.join("candidates.jsonl");
        write_jsonl(&path, &out)?;
        Ok(report("cot_distill", tally, vec![path]))
    }

    pub fn cot_filter(&self, cfg: &FilterConfig) -> Result<StageReport, PipelineError> {
        let candidates: Vec<QaCandidate> = self.input(
            "cot_filter",
            "cot_distill",
            stage_dir(self.out(), "cot_distill").join("candidates.jsonl"),
        )?;
        let dir = stage_dir(self.out(), "cot_filter");
        let mut ledger = self.ledger(&dir, "cot_filter")?;
        let items: Vec<(String, QaCandidate)> = candidates
            .into_iter()
            .map(|c| (c.qa_id.clone(), c))
            .collect();
        let tally = run_items(
            &mut ledger,
            &items,
            self.parallel,
            &Budget::unlimited(),
            |c| {
                let mut c = c.clone();
                for t in &mut c.traces {
                    t.filter = Some(filter_trace(&t.raw_text, cfg));
                }
                Ok(Outcome::emitted(&c))
            },
        )?;
        let out: Vec<QaCandidate> = collect(&ledger, &items, &[Action::Emitted])?;
        let rep = filter_report(&out);
        let path = dir.join("candidates.jsonl");
        let rep_path = dir.join("report.json");
        write_jsonl(&path, &out)?;
        write_json(&rep_path, &rep)?;
        Ok(report("cot_filter", tally, vec![path, rep_path]))
    }

    pub fn bucket(&self, cfg: &BucketConfig) -> Result<StageReport, PipelineError> {
        let upstream = if self.stage_spec("cot_filter").is_some() {
            "cot_filter"
        } else {
            "cot_distill"
        };
        let candidates: Vec<QaCandidate> = self.input(
            "bucket",
            upstream,
            stage_dir(self.out(), upstream).join("candidates.jsonl"),
        )?;
        let buckets = qa::bucket(&candidates, cfg);
        let mut assigned: BTreeMap<&str, Result<qa::Bucket, &str>> = BTreeMap::new();
        for r in &buckets.rl {
            assigned.insert(&r.qa_id, Ok(qa::Bucket::Rl));
        }
        for r in &buckets.sft {
            assigned.insert(&r.qa_id, Ok(qa::Bucket::Sft));
        }
        for r in &buckets.rejected {
            assigned.insert(&r.qa_id, Err(&r.cause));
        }
        let dir = stage_dir(self.out(), "bucket");
        let mut ledger = self.ledger(&dir, "bucket")?;
        let ids: Vec<&str> = candidates.iter().map(|c| c.qa_id.as_str()).collect();
        let mut tally = Tally::default();
        for id in ids {
            if ledger.terminal(id).is_some() {
                tally.skipped += 1;
                continue;
            }
            match assigned.get(id) {
                Some(Ok(b)) => {
                    tally.retained += 1;
                    let data =
                        serde_json::to_value(BucketTag { bucket: *b }).expect("tag serializes");
                    ledger.append(id, Action::Retained, None, Some(data))?;
                }
                Some(Err(cause)) => {
                    tally.dropped += 1;
                    ledger.append(id, Action::Dropped, Some(cause.to_string()), None)?;
                }
                None => {
                    return Err(PipelineError::Integrity(format!(
                        "candidate {id} was not bucketed"
                    )))
                }
            }
        }
        let sft = dir.join("sft.jsonl");
        let rl = dir.join("rl.jsonl");
        let rejected = dir.join("rejected.jsonl");
        write_jsonl(&sft, &buckets.sft)?;
        write_jsonl(&rl, &buckets.rl)?;
        write_jsonl(&rejected, &buckets.rejected)?;
        Ok(report("bucket", tally, vec![sft, rl, rejected]))
    }

    pub fn diagnose(&self, spec: &DiagnoseStage) -> Result<StageReport, PipelineError> {
        let mut corpora: Vec<(&str, PathBuf)> = Vec::new();
        for (id, path) in [
            (
                "external",
                stage_dir(self.out(), "score").join("records.jsonl"),
            ),
            (
                "synthetic",
                stage_dir(self.out(), "synth").join("dataset.jsonl"),
            ),
        ] {
            if path.exists() {
                corpora.push((id, path));
            }
        }
        if corpora.is_empty() {
            return Err(PipelineError::MissingInput {
                stage: "diagnose".into(),
                needs: "score or synth".into(),
                path: stage_dir(self.out(), "score").join("records.jsonl"),
            });
        }
        let cfg = ReportConfig {
            sample_size: spec.sample_size,
            seed: derive_seed(self.seed, &["diagnose"]),
        };
        let mut reports = Vec::new();
        let mut all_items = Vec::new();
        for (corpus, path) in corpora {
            let records: Vec<ChartRecord> = read_jsonl(&path)?;
            let items: Vec<CorpusItem> = records
                .iter()
                .map(|r| CorpusItem {
                    id: format!("{corpus}/{}", r.chart_id),
                    image: self.store.get(&r.image_ref).ok(),
                    embedding: r.embedding.as_ref().map(|e| e.values.clone()),
                    rpe: r.rpe.map(|s| s.value),
                })
                .collect();
            reports.push(build_report(corpus, &items, &cfg));
            all_items.extend(items);
        }
        let dir = stage_dir(self.out(), "diagnose");
        let (text, csv) = comparison_table(&reports);
        let paths = [
            dir.join("report.json"),
            dir.join("embeddings.csv"),
            dir.join("comparison.txt"),
            dir.join("comparison.csv"),
        ];
        write_json(&paths[0], &reports)?;
        write_atomic(&paths[1], embeddings_csv(&all_items).as_bytes())?;
        write_atomic(&paths[2], text.as_bytes())?;
        write_atomic(&paths[3], csv.as_bytes())?;
        let tally = Tally {
            emitted: reports.len(),
            ..Tally::default()
        };
        Ok(report("diagnose", tally, paths.to_vec()))
    }
}

impl Drop for Runner {
    fn drop(&mut self) {
        if let Some(b) = self.broker.lock().unwrap().take() {
            b.shutdown();
        }
    }
}

fn report(stage: &str, tally: Tally, outputs: Vec<PathBuf>) -> StageReport {
    StageReport {
        stage: stage.to_string(),
        tally,
        outputs,
    }
}

pub fn filter_report(candidates: &[QaCandidate]) -> FilterReport {
    let mut rep = FilterReport {
        candidates: candidates.len(),
        ..FilterReport::default()
    };
    for rule in [Rule::Template, Rule::Length, Rule::Ngram] {
        rep.by_rule.insert(rule_name(rule), 0);
    }
    for c in candidates {
        for t in &c.traces {
            let Some(v) = &t.filter else { continue };
            rep.traces += 1;
            if v.passed {
                rep.passed += 1;
            } else {
                rep.rejected += 1;
            }
            let rules: BTreeSet<String> = v.failures.iter().map(|f| rule_name(f.rule)).collect();
            for r in rules {
                *rep.by_rule.entry(r).or_insert(0) += 1;
            }
        }
    }
    rep
}

fn rule_name(rule: Rule) -> String {
    serde_json::to_value(rule)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}
