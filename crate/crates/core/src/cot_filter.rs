//! Quality gates for distilled reasoning traces: output template, minimum
//! reasoning length and long n-gram repetition.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Template,
    Length,
    Ngram,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Template => "template",
            Rule::Length => "length",
            Rule::Ngram => "ngram",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub passed: bool,
    pub failures: Vec<Failure>,
}

impl FilterVerdict {
    fn from_failures(failures: Vec<Failure>) -> Self {
        Self {
            passed: failures.is_empty(),
            failures,
        }
    }

    fn pass() -> Self {
        Self::from_failures(Vec::new())
    }

    fn fail(rule: Rule, detail: impl Into<String>) -> Self {
        Self::from_failures(vec![Failure {
            rule,
            detail: detail.into(),
        }])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_words: usize,
    pub ngram: usize,
    pub min_repeats: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_words: 100,
            ngram: 50,
            min_repeats: 3,
        }
    }
}

/// Content between the first `<think>` and the first `</think>` after it.
pub fn think_region(text: &str) -> Option<&str> {
    let open = text.find(THINK_OPEN)? + THINK_OPEN.len();
    let close = text[open..].find(THINK_CLOSE)?;
    Some(&text[open..open + close])
}

pub fn validate_template(text: &str) -> FilterVerdict {
    let opens = text.matches(THINK_OPEN).count();
    let closes = text.matches(THINK_CLOSE).count();
    if opens != 1 || closes != 1 {
        return FilterVerdict::fail(
            Rule::Template,
            format!("expected one think block, found {opens} open and {closes} close tags"),
        );
    }
    let open = text.find(THINK_OPEN).unwrap();
    let close = text.find(THINK_CLOSE).unwrap();
    if close < open {
        return FilterVerdict::fail(Rule::Template, "think block closes before it opens");
    }
    let rest = &text[close + THINK_CLOSE.len()..];
    let answered = rest
        .find(ANSWER_OPEN)
        .is_some_and(|a| rest[a + ANSWER_OPEN.len()..].contains(ANSWER_CLOSE));
    if !answered {
        return FilterVerdict::fail(Rule::Template, "no answer block after the think block");
    }
    FilterVerdict::pass()
}

pub fn validate_length(text: &str, min_words: usize) -> FilterVerdict {
    let words = think_region(text).map_or(0, |t| t.split_whitespace().count());
    if words >= min_words {
        FilterVerdict::pass()
    } else {
        FilterVerdict::fail(
            Rule::Length,
            format!("think region has {words} words, minimum is {min_words}"),
        )
    }
}

/// First window that reached the repetition threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NgramHit {
    /// Token offset of the window's first occurrence.
    pub offset: usize,
    pub count: usize,
}

/// Scans whitespace tokens for an `n`-token window occurring at least
/// `min_repeats` times, overlapping occurrences included.
///
/// # Panics
///
/// If `n` is zero.
pub fn find_repeated_ngram(text: &str, n: usize, min_repeats: usize) -> Option<NgramHit> {
    assert!(n >= 1, "n-gram length must be at least 1");
    let mut vocab: HashMap<&str, u64> = HashMap::new();
    let ids: Vec<u64> = text
        .split_whitespace()
        .map(|tok| {
            let next = vocab.len() as u64 + 1;
            *vocab.entry(tok).or_insert(next)
        })
        .collect();
    if ids.len() < n {
        return None;
    }
    if min_repeats <= 1 {
        return Some(NgramHit {
            offset: 0,
            count: 1,
        });
    }

    const BASE: u64 = 0x100_0000_01b3;
    let pow = (1..n).fold(1u64, |acc, _| acc.wrapping_mul(BASE));
    let mut hash = ids[..n]
        .iter()
        .fold(0u64, |h, &id| h.wrapping_mul(BASE).wrapping_add(id));

    // hash -> distinct windows sharing it, as (first offset, count)
    let mut seen: HashMap<u64, Vec<(usize, usize)>> = HashMap::new();
    for start in 0..=ids.len() - n {
        if start > 0 {
            hash = hash
                .wrapping_sub(ids[start - 1].wrapping_mul(pow))
                .wrapping_mul(BASE)
                .wrapping_add(ids[start + n - 1]);
        }
        let window = &ids[start..start + n];
        let bucket = seen.entry(hash).or_default();
        let slot = match bucket.iter().position(|&(o, _)| &ids[o..o + n] == window) {
            Some(i) => i,
            None => {
                bucket.push((start, 0));
                bucket.len() - 1
            }
        };
        bucket[slot].1 += 1;
        let (offset, count) = bucket[slot];
        if count >= min_repeats {
            return Some(NgramHit { offset, count });
        }
    }
    None
}

pub fn ngram_repetition_flag(text: &str, n: usize, min_repeats: usize) -> bool {
    find_repeated_ngram(text, n, min_repeats).is_some()
}

/// All three gates; failures are listed in rule order.
pub fn filter_trace(text: &str, cfg: &FilterConfig) -> FilterVerdict {
    let mut failures = Vec::new();
    failures.extend(validate_template(text).failures);
    failures.extend(validate_length(text, cfg.min_words).failures);
    if let Some(hit) = find_repeated_ngram(text, cfg.ngram, cfg.min_repeats) {
        failures.push(Failure {
            rule: Rule::Ngram,
            detail: format!(
                "{}-gram starting at token {} occurs {} times",
                cfg.ngram, hit.offset, hit.count
            ),
        });
    }
    FilterVerdict::from_failures(failures)
}
