//! Strict JSON run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::cot_filter::FilterConfig;
use crate::forge::BoostThresholds;
use crate::gateway::{EndpointConfig, RetryPolicy, SamplingPreset, Secret};
use crate::prompts::PromptKind;
use crate::qa::BucketConfig;
use crate::rpe::{SpectrumSource, ZeroValidPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/store`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_root: Option<PathBuf>,
    /// Directory of external chart images (`.png`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    /// Worker program followed by its arguments.
    pub worker_cmd: Vec<String>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Records processed concurrently within a stage.
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    /// Omit timestamps from ledgers so reruns are byte-identical.
    #[serde(default)]
    pub canonical_ledger: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub prompt_overrides: BTreeMap<PromptKind, PathBuf>,
    #[serde(default)]
    pub timeouts: Timeouts,
    pub endpoints: BTreeMap<String, EndpointSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<ScoringSpec>,
    pub stages: Vec<StageSpec>,
}

fn default_workers() -> usize {
    4
}

fn default_parallel() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timeouts {
    pub render_s: f64,
    pub script_s: f64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self {
            render_s: 60.0,
            script_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_batch")]
    pub embed_batch_size: usize,
}

fn default_timeout() -> f64 {
    600.0
}

fn default_batch() -> usize {
    32
}

impl EndpointSpec {
    pub fn to_config(&self) -> Result<EndpointConfig, PipelineError> {
        let auth_token = match &self.auth_token_env {
            Some(var) => Some(Secret::new(std::env::var(var).map_err(|_| {
                PipelineError::Config(format!("environment variable {var} is not set"))
            })?)),
            None => None,
        };
        Ok(EndpointConfig {
            base_url: self.base_url.clone(),
            model_id: self.model.clone(),
            auth_token,
            max_parallel: self.max_parallel,
            retry: self.retry,
            timeout_s: self.timeout_s,
            embed_batch_size: self.embed_batch_size,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSpec {
    pub rollout_endpoint: String,
    pub embed_endpoint: String,
    #[serde(default = "default_rollouts")]
    pub rollouts: u32,
    #[serde(default = "rollout_sampling")]
    pub sampling: SamplingPreset,
    #[serde(default)]
    pub spectrum: SpectrumSource,
    #[serde(default)]
    pub zero_valid: ZeroValidPolicy,
}

fn default_rollouts() -> u32 {
    8
}

fn rollout_sampling() -> SamplingPreset {
    SamplingPreset::ROLLOUT
}

fn coder_sampling() -> SamplingPreset {
    SamplingPreset::CODER
}

fn reasoning_sampling() -> SamplingPreset {
    SamplingPreset::REASONING
}

fn default_threshold() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageSpec {
    Score(ScoreStage),
    FilterHard(ThresholdStage),
    ColdStart(ColdStartStage),
    ExportCoderSet(EmptyStage),
    SelfEnhance(SelfEnhanceStage),
    Synth(ThresholdStage),
    QaSynth(QaSynthStage),
    CotDistill(DistillStage),
    CotFilter(FilterConfig),
    Bucket(BucketConfig),
    Diagnose(DiagnoseStage),
}

impl StageSpec {
    pub fn name(&self) -> &'static str {
        match self {
            StageSpec::Score(_) => "score",
            StageSpec::FilterHard(_) => "filter_hard",
            StageSpec::ColdStart(_) => "cold_start",
            StageSpec::ExportCoderSet(_) => "export_coder_set",
            StageSpec::SelfEnhance(_) => "self_enhance",
            StageSpec::Synth(_) => "synth",
            StageSpec::QaSynth(_) => "qa_synth",
            StageSpec::CotDistill(_) => "cot_distill",
            StageSpec::CotFilter(_) => "cot_filter",
            StageSpec::Bucket(_) => "bucket",
            StageSpec::Diagnose(_) => "diagnose",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyStage {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreStage {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdStage {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl Default for ThresholdStage {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColdStartStage {
    pub endpoint: String,
    #[serde(default = "rollout_sampling")]
    pub sampling: SamplingPreset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfEnhanceStage {
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    /// One coder per iteration; the last entry is reused when the list is
    /// shorter than `iterations`.
    pub coder_endpoints: Vec<String>,
    /// Coder samples drawn per iteration.
    pub samples: u32,
    #[serde(default = "coder_sampling")]
    pub sampling: SamplingPreset,
    #[serde(default)]
    pub thresholds: BoostThresholds,
    /// Add accepted candidates to the similarity index for later iterations.
    #[serde(default)]
    pub grow_index: bool,
}

fn default_iterations() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSynthStage {
    pub endpoint: String,
    #[serde(default = "default_scripts")]
    pub scripts_per_chart: u32,
    #[serde(default = "reasoning_sampling")]
    pub sampling: SamplingPreset,
}

fn default_scripts() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillStage {
    pub endpoint: String,
    #[serde(default = "default_traces")]
    pub traces: u32,
    #[serde(default = "reasoning_sampling")]
    pub sampling: SamplingPreset,
}

fn default_traces() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseStage {
    #[serde(default = "default_sample")]
    pub sample_size: usize,
}

impl Default for DiagnoseStage {
    fn default() -> Self {
        Self {
            sample_size: default_sample(),
        }
    }
}

fn default_sample() -> usize {
    1000
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            // serde_json messages already end with "at line L column C"
            PipelineError::Config(format!("manifest field `{}`: {}", e.path(), e.inner()))
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads a manifest and resolves its relative paths against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.resolve_paths(base);
        Ok(m)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.store_root.iter_mut().for_each(fix);
        self.corpus.iter_mut().for_each(fix);
        self.mock_script.iter_mut().for_each(fix);
        self.prompt_overrides.values_mut().for_each(fix);
    }

    pub fn store_root(&self) -> PathBuf {
        self.store_root
            .clone()
            .unwrap_or_else(|| self.output_dir.join("store"))
    }

    pub fn endpoint(&self, name: &str) -> Result<EndpointConfig, PipelineError> {
        self.endpoints
            .get(name)
            .ok_or_else(|| PipelineError::Config(format!("endpoint {name:?} is not defined")))?
            .to_config()
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.worker_cmd.is_empty() {
            return err("worker_cmd must name a program".into());
        }
        if self.workers == 0 || self.max_parallel == 0 {
            return err("workers and max_parallel must be ≥ 1".into());
        }
        if !(self.timeouts.render_s > 0.0 && self.timeouts.script_s > 0.0) {
            return err("timeouts must be > 0".into());
        }
        let known = |name: &str, what: &str| -> Result<(), PipelineError> {
            if self.endpoints.contains_key(name) {
                Ok(())
            } else {
                Err(PipelineError::Config(format!(
                    "{what} references undefined endpoint {name:?}"
                )))
            }
        };
        let unit = |v: f64, what: &str| -> Result<(), PipelineError> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(PipelineError::Config(format!(
                    "{what} = {v} is outside [0, 1]"
                )))
            }
        };
        if let Some(s) = &self.scoring {
            known(&s.rollout_endpoint, "scoring.rollout_endpoint")?;
            known(&s.embed_endpoint, "scoring.embed_endpoint")?;
            if s.rollouts == 0 {
                return err("scoring.rollouts must be ≥ 1".into());
            }
        }
        let needs_scoring = self.stages.iter().any(|s| {
            matches!(
                s,
                StageSpec::Score(_) | StageSpec::SelfEnhance(_) | StageSpec::Synth(_)
            )
        });
        if needs_scoring && self.scoring.is_none() {
            return err("stages score, self_enhance and synth need a `scoring` section".into());
        }
        for stage in &self.stages {
            match stage {
                StageSpec::Score(_) if self.corpus.is_none() => {
                    return err("the score stage needs `corpus`".into())
                }
                StageSpec::FilterHard(t) | StageSpec::Synth(t) => {
                    unit(t.threshold, &format!("{}.threshold", stage.name()))?
                }
                StageSpec::ColdStart(c) => known(&c.endpoint, "cold_start.endpoint")?,
                StageSpec::SelfEnhance(s) => {
                    if s.coder_endpoints.is_empty() {
                        return err("self_enhance.coder_endpoints is empty".into());
                    }
                    for e in &s.coder_endpoints {
                        known(e, "self_enhance.coder_endpoints")?;
                    }
                    unit(s.thresholds.rpe, "self_enhance.thresholds.rpe")?;
                    unit(s.thresholds.sim, "self_enhance.thresholds.sim")?;
                }
                StageSpec::QaSynth(q) => {
                    known(&q.endpoint, "qa_synth.endpoint")?;
                    if q.scripts_per_chart == 0 {
                        return err("qa_synth.scripts_per_chart must be ≥ 1".into());
                    }
                }
                StageSpec::CotDistill(d) => {
                    known(&d.endpoint, "cot_distill.endpoint")?;
                    if d.traces == 0 {
                        return err("cot_distill.traces must be ≥ 1".into());
                    }
                }
                StageSpec::CotFilter(f) if f.ngram == 0 => {
                    return err("cot_filter.ngram must be ≥ 1".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 1,
        "output_dir": "out",
        "worker_cmd": ["w"],
        "endpoints": {"e": {"base_url": "mock://", "model": "m"}},
        "stages": [{"stage": "filter_hard"}, {"stage": "bucket", "rl_quota": 2}]
    }"#;

    #[test]
    fn defaults_apply() {
        let m = Manifest::parse(MINIMAL).unwrap();
        assert_eq!(m.workers, 4);
        assert_eq!(
            m.stages[0],
            StageSpec::FilterHard(ThresholdStage { threshold: 0.4 })
        );
        assert_eq!(
            m.stages[1],
            StageSpec::Bucket(BucketConfig {
                rl_quota: 2,
                sft_traces: 1
            })
        );
        assert_eq!(m.store_root(), PathBuf::from("out/store"));
    }

    #[test]
    fn unknown_fields_name_the_path() {
        let bad = MINIMAL.replace("\"rl_quota\": 2", "\"rl_qouta\": 2");
        let msg = Manifest::parse(&bad).unwrap_err().to_string();
        assert!(
            msg.contains("stages[1]") && msg.contains("rl_qouta"),
            "{msg}"
        );
        let bad = MINIMAL.replace("\"seed\": 1,", "\"seed\": 1, \"sed\": 2,");
        let msg = Manifest::parse(&bad).unwrap_err().to_string();
        assert!(msg.contains("sed") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn seed_is_required() {
        let bad = MINIMAL.replace("\"seed\": 1,", "");
        assert!(Manifest::parse(&bad)
            .unwrap_err()
            .to_string()
            .contains("seed"));
    }

    #[test]
    fn references_and_ranges_are_checked() {
        let bad = MINIMAL.replace(
            r#"{"stage": "filter_hard"}"#,
            r#"{"stage": "cold_start", "endpoint": "nope"}"#,
        );
        assert!(Manifest::parse(&bad)
            .unwrap_err()
            .to_string()
            .contains("nope"));
        let bad = MINIMAL.replace(
            r#"{"stage": "filter_hard"}"#,
            r#"{"stage": "filter_hard", "threshold": 1.5}"#,
        );
        assert!(Manifest::parse(&bad).is_err());
        let bad = MINIMAL.replace(r#"{"stage": "filter_hard"}"#, r#"{"stage": "score"}"#);
        assert!(Manifest::parse(&bad)
            .unwrap_err()
            .to_string()
            .contains("scoring"));
    }

    #[test]
    fn auth_token_comes_from_environment() {
        let spec = EndpointSpec {
            base_url: "http://x".into(),
            model: "m".into(),
            auth_token_env: Some("CHARTSYNTH_TEST_UNSET_TOKEN_VAR".into()),
            max_parallel: 1,
            retry: RetryPolicy::default(),
            timeout_s: 1.0,
            embed_batch_size: 1,
        };
        assert!(spec.to_config().is_err());
    }
}
