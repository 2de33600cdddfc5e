//! Independent re-check of emitted SFT/RL records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::jsonl::read_jsonl;
use super::PipelineError;
use crate::answer::{answers_match, extract_last_tag};
use crate::qa::{FailRate, RlRecord, SftRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub file: PathBuf,
    /// 1-based record line.
    pub line: usize,
    pub qa_id: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: qa_id {}: {}",
            self.file.display(),
            self.line,
            self.qa_id,
            self.detail
        )
    }
}

/// Locates `sft.jsonl`/`rl.jsonl` in `dir` or in `dir/bucket`.
fn dataset_files(dir: &Path) -> Result<(PathBuf, PathBuf), PipelineError> {
    for base in [dir.to_path_buf(), dir.join("bucket")] {
        let (sft, rl) = (base.join("sft.jsonl"), base.join("rl.jsonl"));
        if sft.exists() || rl.exists() {
            return Ok((sft, rl));
        }
    }
    Err(PipelineError::Config(format!(
        "{} contains no sft.jsonl or rl.jsonl",
        dir.display()
    )))
}

#[allow(clippy::too_many_arguments)]
fn check_common(
    out: &mut Vec<Violation>,
    file: &Path,
    line: usize,
    qa_id: &str,
    answer: &str,
    consistency_answer: &str,
    rate: FailRate,
    expected_traces: u32,
) {
    let mut flag = |detail: String| {
        out.push(Violation {
            file: file.to_path_buf(),
            line,
            qa_id: qa_id.to_string(),
            detail,
        })
    };
    if !answers_match(consistency_answer, answer) {
        flag(format!(
            "consistency answer {consistency_answer:?} does not match ground truth {answer:?}"
        ));
    }
    if rate.traces != expected_traces {
        flag(format!(
            "fail rate over {} traces, expected {expected_traces}",
            rate.traces
        ));
    }
    if rate.failures == 0 || rate.failures >= rate.traces {
        flag(format!(
            "fail rate {}/{} is not strictly between 0 and 1",
            rate.failures, rate.traces
        ));
    }
}

/// Returns every anchor violation in the dataset; empty means sound.
pub fn validate_dataset(dir: &Path, expected_traces: u32) -> Result<Vec<Violation>, PipelineError> {
    let (sft_path, rl_path) = dataset_files(dir)?;
    let mut out = Vec::new();
    let mut seen: BTreeMap<String, &'static str> = BTreeMap::new();

    let sft: Vec<SftRecord> = if sft_path.exists() {
        read_jsonl(&sft_path)?
    } else {
        Vec::new()
    };
    for (i, r) in sft.iter().enumerate() {
        let line = i + 1;
        check_common(
            &mut out,
            &sft_path,
            line,
            &r.qa_id,
            &r.answer,
            &r.provenance.consistency_answer,
            r.fail_rate,
            expected_traces,
        );
        match extract_last_tag(&r.cot_trace, "answer") {
            Some(a) if answers_match(&a, &r.answer) => {}
            Some(a) => out.push(Violation {
                file: sft_path.clone(),
                line,
                qa_id: r.qa_id.clone(),
                detail: format!(
                    "trace answer {a:?} does not match ground truth {:?}",
                    r.answer
                ),
            }),
            None => out.push(Violation {
                file: sft_path.clone(),
                line,
                qa_id: r.qa_id.clone(),
                detail: "trace has no <answer> tag".into(),
            }),
        }
        seen.insert(r.qa_id.clone(), "sft");
    }

    let rl: Vec<RlRecord> = if rl_path.exists() {
        read_jsonl(&rl_path)?
    } else {
        Vec::new()
    };
    for (i, r) in rl.iter().enumerate() {
        let line = i + 1;
        check_common(
            &mut out,
            &rl_path,
            line,
            &r.qa_id,
            &r.answer,
            &r.provenance.consistency_answer,
            r.fail_rate,
            expected_traces,
        );
        if seen.insert(r.qa_id.clone(), "rl") == Some("sft") {
            out.push(Violation {
                file: rl_path.clone(),
                line,
                qa_id: r.qa_id.clone(),
                detail: "record appears in both sft and rl".into(),
            });
        }
    }
    Ok(out)
}
