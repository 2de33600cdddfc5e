//! Chart corpus construction: complexity scoring, hard-seed selection, cold
//! start, coder sampling with complexity/novelty filtering, and dataset
//! selection.
//!
//! Functions here handle one record at a time; the pipeline layer supplies
//! parallelism, checkpointing and the ledger.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::extract_code;
use crate::broker::{Broker, BrokerError, ExecStatus, ExecutionTask, TaskKind};
use crate::gateway::{
    ChatRequest, EmbedInput, EmbeddingVector, EndpointConfig, Gateway, GatewayError, Message, Part,
    Role, SamplingPreset,
};
use crate::prompts::{PromptCatalog, PromptKind};
use crate::rpe::{rpe, EmbeddingMatrix, RpeConfig, RpeError, RpeScore};
use crate::store::{digest_hex, ContentStore};

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Rpe(#[from] RpeError),
    #[error("store: {0}")]
    Store(#[from] std::io::Error),
    #[error("records without an RPE score: {0:?}")]
    Unscored(Vec<String>),
    #[error("records without an embedding: {0:?}")]
    Unembedded(Vec<String>),
    #[error("hard seed index: {0}")]
    Index(String),
}

impl ForgeError {
    /// Failures that leave the record resumable rather than aborting the run.
    pub fn is_record_level(&self) -> bool {
        matches!(self, ForgeError::Gateway(e) if e.is_transport())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartSource {
    ExternalCorpus,
    ColdStart,
    CoderSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRecord {
    /// Digest of the source code, or of the image for external charts.
    pub chart_id: String,
    pub source: ChartSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpe: Option<RpeScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_sim_to_hard: Option<f64>,
    pub iteration: u32,
}

impl ChartRecord {
    pub fn external(image_ref: String) -> Self {
        Self {
            chart_id: image_ref.clone(),
            source: ChartSource::ExternalCorpus,
            code: None,
            image_ref,
            embedding: None,
            rpe: None,
            max_sim_to_hard: None,
            iteration: 0,
        }
    }

    pub fn from_code(code: String, image_ref: String, source: ChartSource, iteration: u32) -> Self {
        Self {
            chart_id: digest_hex(code.as_bytes()),
            source,
            code: Some(code),
            image_ref,
            embedding: None,
            rpe: None,
            max_sim_to_hard: None,
            iteration,
        }
    }
}

/// Shared services for per-record work.
#[derive(Clone, Copy)]
pub struct ForgeContext<'a> {
    pub gateway: &'a Gateway,
    pub broker: &'a Broker,
    pub prompts: &'a PromptCatalog,
    pub store: &'a ContentStore,
    pub render_timeout_s: f64,
}

/// Rollout campaign settings for one RPE score.
#[derive(Debug, Clone)]
pub struct ScoringConfig {
    pub rollout_endpoint: EndpointConfig,
    pub embed_endpoint: EndpointConfig,
    pub rollouts: u32,
    pub sampling: SamplingPreset,
    pub rpe: RpeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    NoCode,
    Ok,
    ExecError,
    Timeout,
    WorkerCrash,
    Rejected,
}

impl From<ExecStatus> for RolloutStatus {
    fn from(s: ExecStatus) -> Self {
        match s {
            ExecStatus::Ok => RolloutStatus::Ok,
            ExecStatus::ExecError => RolloutStatus::ExecError,
            ExecStatus::Timeout => RolloutStatus::Timeout,
            ExecStatus::WorkerCrash => RolloutStatus::WorkerCrash,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    /// `None` when every rollout failed and the drop policy is active.
    pub score: Option<RpeScore>,
    pub image_embedding: EmbeddingVector,
    pub rollouts: Vec<RolloutStatus>,
}

/// Result of rendering a program through the broker.
pub enum Rendered {
    Image(Vec<u8>),
    Failed(RolloutStatus),
}

pub fn render(ctx: &ForgeContext<'_>, code: &str) -> Result<Rendered, ForgeError> {
    let task = ExecutionTask::new(TaskKind::Render, code).timeout(ctx.render_timeout_s);
    match ctx.broker.submit(&task) {
        Ok(res) => Ok(match (res.status, res.artifact) {
            (ExecStatus::Ok, Some(bytes)) => Rendered::Image(bytes),
            (status, _) => Rendered::Failed(status.into()),
        }),
        Err(BrokerError::InvalidInput(_) | BrokerError::Protocol(_)) => {
            Ok(Rendered::Failed(RolloutStatus::Rejected))
        }
        Err(e) => Err(e.into()),
    }
}

fn codegen_request(ctx: &ForgeContext<'_>, image: &[u8], sampling: SamplingPreset) -> ChatRequest {
    let prompt = ctx.prompts.render(PromptKind::Codegen, &[]);
    ChatRequest::new(
        vec![Message {
            role: Role::User,
            parts: vec![Part::Text(prompt), Part::png(image.to_vec())],
        }],
        sampling,
    )
}

/// Runs the rollout campaign for one chart image and scores it.
pub fn score_image(
    ctx: &ForgeContext<'_>,
    cfg: &ScoringConfig,
    image: &[u8],
    seed: u64,
) -> Result<ScoreOutcome, ForgeError> {
    let req = codegen_request(ctx, image, cfg.sampling)
        .samples(cfg.rollouts)
        .seed(seed);
    let completions = ctx.gateway.chat(&cfg.rollout_endpoint, &req)?;

    let mut statuses = Vec::with_capacity(completions.len());
    let mut inputs = vec![EmbedInput::Image(image.to_vec())];
    for text in &completions {
        let Some(code) = extract_code(text) else {
            statuses.push(RolloutStatus::NoCode);
            continue;
        };
        match render(ctx, &code)? {
            Rendered::Image(png) => {
                statuses.push(RolloutStatus::Ok);
                inputs.push(EmbedInput::Image(png));
            }
            Rendered::Failed(s) => statuses.push(s),
        }
    }

    let mut vectors = ctx.gateway.embed(&cfg.embed_endpoint, &inputs)?;
    let rollout_vectors = vectors.split_off(1);
    let image_embedding = vectors.pop().expect("original image embedded first");
    let matrix = if rollout_vectors.is_empty() {
        None
    } else {
        let rows: Vec<&[f64]> = rollout_vectors
            .iter()
            .map(|v| v.values.as_slice())
            .collect();
        Some(EmbeddingMatrix::from_rows(&rows)?)
    };
    let score = rpe(cfg.rollouts as usize, matrix.as_ref(), &cfg.rpe)?;
    Ok(ScoreOutcome {
        score,
        image_embedding,
        rollouts: statuses,
    })
}

/// Embeddings of every hard seed, searched by exact max cosine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HardSeedIndex {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl HardSeedIndex {
    pub fn from_records(records: &[ChartRecord]) -> Result<Self, ForgeError> {
        let mut index = Self::default();
        for r in records {
            let emb = r
                .embedding
                .as_ref()
                .ok_or_else(|| ForgeError::Unembedded(vec![r.chart_id.clone()]))?;
            index.insert(r.chart_id.clone(), emb.values.clone())?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<(), ForgeError> {
        if self.entries.iter().any(|(e, _)| *e == id) {
            return Err(ForgeError::Index(format!("duplicate chart id {id}")));
        }
        if let Some((_, first)) = self.entries.first() {
            if first.len() != vector.len() {
                return Err(ForgeError::Index(format!(
                    "dimension {} does not match index dimension {}",
                    vector.len(),
                    first.len()
                )));
            }
        }
        self.entries.push((id, vector));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest cosine similarity between `v` and any entry.
    pub fn max_cosine(&self, v: &[f64]) -> Option<f64> {
        self.entries
            .iter()
            .map(|(_, e)| cosine(e, v))
            .fold(None, |acc, c| Some(acc.map_or(c, |a: f64| a.max(c))))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Splits scored records at `threshold` (inclusive, sentinel always kept).
pub fn filter_hard(
    records: &[ChartRecord],
    threshold: f64,
) -> Result<(Vec<ChartRecord>, Vec<ChartRecord>), ForgeError> {
    let unscored: Vec<String> = records
        .iter()
        .filter(|r| r.rpe.is_none())
        .map(|r| r.chart_id.clone())
        .collect();
    if !unscored.is_empty() {
        return Err(ForgeError::Unscored(unscored));
    }
    Ok(records
        .iter()
        .cloned()
        .partition(|r| r.rpe.expect("checked").value.at_least(threshold)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostThresholds {
    pub rpe: f64,
    pub sim: f64,
}

impl Default for BoostThresholds {
    fn default() -> Self {
        Self {
            rpe: 0.4,
            sim: 0.65,
        }
    }
}

/// Keep a candidate that is complex enough and far enough from the seeds.
pub fn boost_decision(score: &RpeScore, max_sim: f64, t: &BoostThresholds) -> bool {
    score.value.at_least(t.rpe) && max_sim <= t.sim
}

/// Outcome of a per-record step that may drop its input.
#[derive(Debug, Clone, PartialEq)]
pub enum Kept<T> {
    Yes(T),
    No { cause: String },
}

fn dropped<T>(cause: impl Into<String>) -> Kept<T> {
    Kept::No {
        cause: cause.into(),
    }
}

fn status_cause(s: RolloutStatus) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// One code-generation call for a hard image; keeps the result only if it
/// renders.
pub fn cold_start_one(
    ctx: &ForgeContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    image: &[u8],
    seed: u64,
) -> Result<Kept<ChartRecord>, ForgeError> {
    let req = codegen_request(ctx, image, sampling).seed(seed);
    let text = ctx.gateway.chat(endpoint, &req)?.remove(0);
    let Some(code) = extract_code(&text) else {
        return Ok(dropped("no_code"));
    };
    Ok(match render(ctx, &code)? {
        Rendered::Image(png) => {
            let image_ref = ctx.store.put(&png)?;
            Kept::Yes(ChartRecord::from_code(
                code,
                image_ref,
                ChartSource::ColdStart,
                0,
            ))
        }
        Rendered::Failed(s) => dropped(status_cause(s)),
    })
}

/// One unconditional sample from the chart coder.
pub fn sample_one(
    ctx: &ForgeContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    seed: u64,
) -> Result<Option<String>, ForgeError> {
    let system = ctx.prompts.render(PromptKind::CoderSystem, &[]);
    let req = ChatRequest::new(
        vec![
            Message::text(Role::System, system),
            Message::text(Role::User, ""),
        ],
        sampling,
    )
    .seed(seed);
    let text = ctx.gateway.chat(endpoint, &req)?.remove(0);
    Ok(extract_code(&text))
}

/// Renders, scores and compares one coder candidate against the index.
pub fn boost_one(
    ctx: &ForgeContext<'_>,
    scoring: &ScoringConfig,
    index: &HardSeedIndex,
    thresholds: &BoostThresholds,
    code: &str,
    iteration: u32,
    seed: u64,
) -> Result<Kept<ChartRecord>, ForgeError> {
    if index.is_empty() {
        return Err(ForgeError::Index("hard seed index is empty".into()));
    }
    let png = match render(ctx, code)? {
        Rendered::Image(png) => png,
        Rendered::Failed(s) => return Ok(dropped(status_cause(s))),
    };
    let image_ref = ctx.store.put(&png)?;
    let outcome = score_image(ctx, scoring, &png, seed)?;
    let mut rec = ChartRecord::from_code(
        code.to_string(),
        image_ref,
        ChartSource::CoderSample,
        iteration,
    );
    let Some(score) = outcome.score else {
        return Ok(dropped("zero_valid"));
    };
    let sim = index
        .max_cosine(&outcome.image_embedding.values)
        .expect("index is nonempty");
    rec.rpe = Some(score);
    rec.max_sim_to_hard = Some(sim);
    rec.embedding = Some(outcome.image_embedding);
    if boost_decision(&score, sim, thresholds) {
        Ok(Kept::Yes(rec))
    } else if !score.value.at_least(thresholds.rpe) {
        Ok(dropped("rpe_below_threshold"))
    } else {
        Ok(dropped("too_similar"))
    }
}

/// Fills in the score and embedding of a record that has none yet.
pub fn ensure_scored(
    ctx: &ForgeContext<'_>,
    scoring: &ScoringConfig,
    record: &ChartRecord,
    seed: u64,
) -> Result<Option<ChartRecord>, ForgeError> {
    if record.rpe.is_some() && record.embedding.is_some() {
        return Ok(Some(record.clone()));
    }
    let image = ctx.store.get(&record.image_ref)?;
    let outcome = score_image(ctx, scoring, &image, seed)?;
    let Some(score) = outcome.score else {
        return Ok(None);
    };
    let mut rec = record.clone();
    rec.rpe = Some(score);
    rec.embedding = Some(outcome.image_embedding);
    Ok(Some(rec))
}

/// Training line for the chart coder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoderExample {
    pub system: String,
    pub output: String,
}

/// Writes one `{system, output}` JSON line per record with code.
pub fn export_coder_training_set(
    records: &[ChartRecord],
    prompts: &PromptCatalog,
    mut out: impl Write,
) -> std::io::Result<usize> {
    let system = prompts.render(PromptKind::CoderSystem, &[]);
    let mut n = 0;
    for r in records {
        let Some(code) = &r.code else { continue };
        let line = CoderExample {
            system: system.clone(),
            output: code.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    Ok(n)
}

/// Collapses candidates sharing a chart id, keeping the first; output is
/// sorted by chart id.
pub fn dedup_by_chart_id(mut records: Vec<ChartRecord>) -> Vec<ChartRecord> {
    records.sort_by(|a, b| a.chart_id.cmp(&b.chart_id));
    records.dedup_by(|b, a| a.chart_id == b.chart_id);
    records
}
