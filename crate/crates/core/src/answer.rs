//! Answer normalization, matching and tag/code extraction from completions.

/// Trim, lowercase and collapse internal whitespace runs to one space.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Splits a leading decimal literal off `s`. Returns the value and the
/// trimmed remainder.
fn numeric_prefix(s: &str) -> Option<(f64, &str)> {
    let b = s.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        let frac_start = i + 1;
        let mut j = frac_start;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        digits += j - frac_start;
        if digits > 0 {
            i = j;
        }
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        let mut j = i + 1;
        if j < b.len() && (b[j] == b'+' || b[j] == b'-') {
            j += 1;
        }
        let exp_start = j;
        while j < b.len() && b[j].is_ascii_digit() {
            j += 1;
        }
        if j > exp_start {
            i = j;
        }
    }
    let value: f64 = s[..i].parse().ok()?;
    value.is_finite().then(|| (value, s[i..].trim()))
}

pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= (REL_TOL * a.abs().max(b.abs())).max(ABS_TOL)
}

/// Deterministic answer equivalence. Numbers (with identical unit suffixes)
/// compare within a relative tolerance; everything else compares on the
/// normalized string.
pub fn answers_match(a: &str, b: &str) -> bool {
    let (na, nb) = (normalize(a), normalize(b));
    if na == nb {
        return true;
    }
    match (numeric_prefix(&na), numeric_prefix(&nb)) {
        (Some((x, ua)), Some((y, ub))) if ua == ub => close(x, y),
        _ => false,
    }
}

/// Pluggable equivalence, e.g. an LLM judge. The default is
/// [`answers_match`].
pub trait AnswerMatcher: Send + Sync {
    fn matches(&self, candidate: &str, reference: &str) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NormalizedMatch;

impl AnswerMatcher for NormalizedMatch {
    fn matches(&self, candidate: &str, reference: &str) -> bool {
        answers_match(candidate, reference)
    }
}

/// Content of the last `<tag>…</tag>` pair, trimmed.
pub fn extract_last_tag(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let end = text.rfind(&close)?;
    let start = text[..end].rfind(&open)? + open.len();
    Some(text[start..end].trim().to_string())
}

/// Code from a completion: the first fenced block, else the whole text when
/// it looks like a program (has an import line).
pub fn extract_code(text: &str) -> Option<String> {
    if let Some(code) = first_fenced_block(text) {
        return (!code.trim().is_empty()).then_some(code);
    }
    let looks_like_code = text.lines().any(|l| {
        let l = l.trim_start();
        l.starts_with("import ") || (l.starts_with("from ") && l.contains(" import "))
    });
    looks_like_code.then(|| text.trim().to_string())
}

fn first_fenced_block(text: &str) -> Option<String> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // skip the info string (e.g. `python`)
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim_end().to_string())
}

/// Script payload from a tagged response; a fenced block inside the tags is
/// unwrapped.
pub fn extract_script(text: &str) -> Option<String> {
    let inner = extract_last_tag(text, "answer")?;
    let code = first_fenced_block(&inner).unwrap_or(inner);
    let code = code.trim().to_string();
    (!code.is_empty()).then_some(code)
}
