//! Answer-first question synthesis, reasoning-trace distillation, fail
//! rates and the SFT/RL split.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{extract_last_tag, extract_script, AnswerMatcher};
use crate::broker::{Broker, BrokerError, ExecStatus, ExecutionTask, TaskKind};
use crate::cot_filter::FilterVerdict;
use crate::gateway::{
    ChatRequest, EndpointConfig, Gateway, GatewayError, Message, Part, Role, SamplingPreset,
};
use crate::prompts::{self, PromptCatalog, PromptKind};
use crate::store::digest_hex;

#[derive(Debug, Error)]
pub enum QaError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("expected {expected} traces, got {got}")]
    TraceCount { expected: usize, got: usize },
}

/// Exact failure fraction `failures / traces`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FailRate {
    pub failures: u32,
    pub traces: u32,
}

impl FailRate {
    pub fn value(&self) -> f64 {
        self.failures as f64 / self.traces as f64
    }

    /// Strictly between trivially solved and never solved.
    pub fn is_interior(&self) -> bool {
        self.failures > 0 && self.failures < self.traces
    }

    fn cmp_value(&self, other: &Self) -> Ordering {
        (self.failures as u64 * other.traces as u64)
            .cmp(&(other.failures as u64 * self.traces as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotTrace {
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<String>,
    pub matches_gt: bool,
    pub token_estimate: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterVerdict>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Rejected,
    Sft,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaCandidate {
    pub qa_id: String,
    pub chart_id: String,
    pub image_ref: String,
    pub script_index: u32,
    pub script: String,
    pub answer_py: String,
    pub question: String,
    pub consistency_answer: String,
    pub consistent: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub traces: Vec<CotTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_rate: Option<FailRate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<Bucket>,
}

pub fn qa_id(chart_id: &str, script_index: u32) -> String {
    digest_hex(format!("{chart_id}:{script_index}").as_bytes())[..16].to_string()
}

#[derive(Clone, Copy)]
pub struct QaContext<'a> {
    pub gateway: &'a Gateway,
    pub broker: &'a Broker,
    pub prompts: &'a PromptCatalog,
    pub matcher: &'a dyn AnswerMatcher,
    pub script_timeout_s: f64,
}

fn text_request(prompt: String, sampling: SamplingPreset, seed: u64) -> ChatRequest {
    ChatRequest::new(vec![Message::text(Role::User, prompt)], sampling).seed(seed)
}

/// Asks for an answer script; `None` when the reply has no tagged script.
pub fn gen_answer_script(
    ctx: &QaContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    chart_code: &str,
    seed: u64,
) -> Result<Option<String>, QaError> {
    let prompt = ctx
        .prompts
        .render(PromptKind::QaScript, &[(prompts::CHART_CODE, chart_code)]);
    let text = ctx
        .gateway
        .chat(endpoint, &text_request(prompt, sampling, seed))?
        .remove(0);
    Ok(extract_script(&text))
}

/// Executes the script; the error string is the rejection cause.
pub fn ground_truth(ctx: &QaContext<'_>, script: &str) -> Result<Result<String, String>, QaError> {
    let task = ExecutionTask::new(TaskKind::Script, script).timeout(ctx.script_timeout_s);
    match ctx.broker.submit(&task) {
        Ok(res) => Ok(match (res.status, res.final_print) {
            (ExecStatus::Ok, Some(line)) => Ok(line),
            (status, _) => Err(status.to_string()),
        }),
        Err(BrokerError::Protocol(_)) => Ok(Err("protocol".into())),
        Err(BrokerError::InvalidInput(_)) => Ok(Err("invalid_script".into())),
        Err(e) => Err(e.into()),
    }
}

pub fn gen_question(
    ctx: &QaContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    chart_code: &str,
    script: &str,
    seed: u64,
) -> Result<Option<String>, QaError> {
    let prompt = ctx.prompts.render(
        PromptKind::QaQuestion,
        &[(prompts::CHART_CODE, chart_code), (prompts::SCRIPT, script)],
    );
    let text = ctx
        .gateway
        .chat(endpoint, &text_request(prompt, sampling, seed))?
        .remove(0);
    Ok(extract_last_tag(&text, "question").filter(|q| !q.is_empty()))
}

/// Answers the question from code alone and compares with the executed
/// answer. Returns the inferred answer (if any) and the verdict.
pub fn consistency_check(
    ctx: &QaContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    chart_code: &str,
    question: &str,
    answer_py: &str,
    seed: u64,
) -> Result<(Option<String>, bool), QaError> {
    let prompt = ctx.prompts.render(
        PromptKind::QaConsistency,
        &[
            (prompts::CHART_CODE, chart_code),
            (prompts::GENERATED_QUESTION, question),
        ],
    );
    let text = ctx
        .gateway
        .chat(endpoint, &text_request(prompt, sampling, seed))?
        .remove(0);
    let inferred = extract_last_tag(&text, "answer");
    let consistent = inferred
        .as_deref()
        .is_some_and(|a| ctx.matcher.matches(a, answer_py));
    Ok((inferred, consistent))
}

#[derive(Debug, Clone)]
pub struct SynthInput<'a> {
    pub chart_id: &'a str,
    pub image_ref: &'a str,
    pub chart_code: &'a str,
    pub script_index: u32,
    pub seed: u64,
}

/// Outcome of the script → execute → question → check chain.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthOutcome {
    Consistent(QaCandidate),
    Rejected {
        cause: String,
        partial: Option<QaCandidate>,
    },
}

pub fn synthesize_candidate(
    ctx: &QaContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    input: &SynthInput<'_>,
) -> Result<SynthOutcome, QaError> {
    let reject = |cause: &str| SynthOutcome::Rejected {
        cause: cause.to_string(),
        partial: None,
    };
    let Some(script) = gen_answer_script(ctx, endpoint, sampling, input.chart_code, input.seed)?
    else {
        return Ok(reject("script_parse"));
    };
    let answer_py = match ground_truth(ctx, &script)? {
        Ok(a) => a,
        Err(cause) => return Ok(reject(&cause)),
    };
    let Some(question) = gen_question(
        ctx,
        endpoint,
        sampling,
        input.chart_code,
        &script,
        input.seed,
    )?
    else {
        return Ok(reject("question_parse"));
    };
    let (inferred, consistent) = consistency_check(
        ctx,
        endpoint,
        sampling,
        input.chart_code,
        &question,
        &answer_py,
        input.seed,
    )?;
    let candidate = QaCandidate {
        qa_id: qa_id(input.chart_id, input.script_index),
        chart_id: input.chart_id.to_string(),
        image_ref: input.image_ref.to_string(),
        script_index: input.script_index,
        script,
        answer_py,
        question,
        consistency_answer: inferred.clone().unwrap_or_default(),
        consistent,
        traces: Vec::new(),
        fail_rate: None,
        bucket: None,
    };
    Ok(if consistent {
        SynthOutcome::Consistent(candidate)
    } else {
        SynthOutcome::Rejected {
            cause: if inferred.is_some() {
                "inconsistent"
            } else {
                "consistency_parse"
            }
            .into(),
            partial: Some(candidate),
        }
    })
}

/// `n` independent traces for the question with the chart image attached.
/// Transport failures become unmatched traces.
#[allow(clippy::too_many_arguments)]
pub fn distill_traces(
    ctx: &QaContext<'_>,
    endpoint: &EndpointConfig,
    sampling: SamplingPreset,
    image: &[u8],
    question: &str,
    answer_py: &str,
    n: u32,
    seed: u64,
) -> Result<Vec<CotTrace>, QaError> {
    let prompt = ctx
        .prompts
        .render(PromptKind::CotDistill, &[(prompts::QUESTION, question)]);
    let mut traces = Vec::with_capacity(n as usize);
    for j in 0..n {
        let req = ChatRequest::new(
            vec![Message {
                role: Role::User,
                parts: vec![Part::Text(prompt.clone()), Part::png(image.to_vec())],
            }],
            sampling,
        )
        .seed(seed.wrapping_add(j as u64));
        let raw_text = match ctx.gateway.chat(endpoint, &req) {
            Ok(mut texts) => texts.remove(0),
            Err(e) if e.is_transport() => {
                log::warn!("trace {j} failed: {e}");
                String::new()
            }
            Err(e) => return Err(e.into()),
        };
        let extracted_answer = extract_last_tag(&raw_text, "answer");
        let matches_gt = extracted_answer
            .as_deref()
            .is_some_and(|a| ctx.matcher.matches(a, answer_py));
        traces.push(CotTrace {
            token_estimate: raw_text.split_whitespace().count(),
            raw_text,
            extracted_answer,
            matches_gt,
            filter: None,
        });
    }
    Ok(traces)
}

pub fn fail_rate(traces: &[CotTrace], expected: usize) -> Result<FailRate, QaError> {
    if traces.len() != expected || expected == 0 {
        return Err(QaError::TraceCount {
            expected,
            got: traces.len(),
        });
    }
    let matches = traces.iter().filter(|t| t.matches_gt).count() as u32;
    Ok(FailRate {
        failures: traces.len() as u32 - matches,
        traces: traces.len() as u32,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub chart_id: String,
    pub script_index: u32,
    pub script: String,
    pub consistency_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub qa_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub cot_trace: String,
    pub fail_rate: FailRate,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub qa_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
    pub fail_rate: FailRate,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub qa_id: String,
    pub cause: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Buckets {
    pub rl: Vec<RlRecord>,
    pub sft: Vec<SftRecord>,
    pub rejected: Vec<RejectedRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BucketConfig {
    pub rl_quota: usize,
    /// Correct traces kept per SFT sample.
    pub sft_traces: usize,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            rl_quota: 0,
            sft_traces: 1,
        }
    }
}

fn provenance(c: &QaCandidate, trace_index: Option<usize>) -> Provenance {
    Provenance {
        chart_id: c.chart_id.clone(),
        script_index: c.script_index,
        script: c.script.clone(),
        consistency_answer: c.consistency_answer.clone(),
        trace_index,
    }
}

/// Splits candidates into RL, SFT and rejected sets. The hardest interior
/// candidates fill the RL quota (ties by `qa_id`); the rest go to SFT with
/// their first correct traces that also passed the trace filter, if one was
/// run.
pub fn bucket(candidates: &[QaCandidate], cfg: &BucketConfig) -> Buckets {
    let mut out = Buckets::default();
    let mut retained: Vec<(&QaCandidate, FailRate)> = Vec::new();
    for c in candidates {
        let cause = match (c.consistent, c.fail_rate) {
            (false, _) => Some("inconsistent"),
            (true, None) => Some("not_distilled"),
            (true, Some(r)) if r.failures == 0 => Some("trivial"),
            (true, Some(r)) if r.failures >= r.traces => Some("unsolved"),
            (true, Some(r)) => {
                retained.push((c, r));
                None
            }
        };
        if let Some(cause) = cause {
            out.rejected.push(RejectedRecord {
                qa_id: c.qa_id.clone(),
                cause: cause.into(),
            });
        }
    }
    retained.sort_by(|(a, ra), (b, rb)| rb.cmp_value(ra).then_with(|| a.qa_id.cmp(&b.qa_id)));

    for (rank, (c, r)) in retained.into_iter().enumerate() {
        if rank < cfg.rl_quota {
            out.rl.push(RlRecord {
                qa_id: c.qa_id.clone(),
                image_ref: c.image_ref.clone(),
                question: c.question.clone(),
                answer: c.answer_py.clone(),
                fail_rate: r,
                provenance: provenance(c, None),
            });
            continue;
        }
        assert!(
            c.traces.iter().any(|t| t.matches_gt),
            "interior fail rate implies a correct trace ({})",
            c.qa_id
        );
        let usable: Vec<(usize, &CotTrace)> = c
            .traces
            .iter()
            .enumerate()
            .filter(|(_, t)| t.matches_gt && t.filter.as_ref().is_none_or(|f| f.passed))
            .take(cfg.sft_traces.max(1))
            .collect();
        if usable.is_empty() {
            out.rejected.push(RejectedRecord {
                qa_id: c.qa_id.clone(),
                cause: "cot_filter".into(),
            });
            continue;
        }
        for (j, t) in usable {
            out.sft.push(SftRecord {
                qa_id: c.qa_id.clone(),
                image_ref: c.image_ref.clone(),
                question: c.question.clone(),
                answer: c.answer_py.clone(),
                cot_trace: t.raw_text.clone(),
                fail_rate: r,
                provenance: provenance(c, Some(j)),
            });
        }
    }
    out.rejected.sort_by(|a, b| a.qa_id.cmp(&b.qa_id));
    out
}
