//! Packaged prompt templates and placeholder substitution.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Image-to-code reconstruction, used for rollouts and cold start.
    Codegen,
    /// System prompt for the chart coder.
    CoderSystem,
    /// Answer-script synthesis from chart code.
    QaScript,
    /// Question synthesis from chart code and script.
    QaQuestion,
    /// Text-only answer used for the consistency check.
    QaConsistency,
    /// Reasoning-trace distillation with the image attached.
    CotDistill,
}

impl PromptKind {
    pub const ALL: [PromptKind; 6] = [
        PromptKind::Codegen,
        PromptKind::CoderSystem,
        PromptKind::QaScript,
        PromptKind::QaQuestion,
        PromptKind::QaConsistency,
        PromptKind::CotDistill,
    ];

    pub fn placeholders(self) -> &'static [&'static str] {
        match self {
            PromptKind::Codegen | PromptKind::CoderSystem => &[],
            PromptKind::QaScript => &[CHART_CODE],
            PromptKind::QaQuestion => &[CHART_CODE, SCRIPT],
            PromptKind::QaConsistency => &[CHART_CODE, GENERATED_QUESTION],
            PromptKind::CotDistill => &[QUESTION],
        }
    }

    fn packaged(self) -> &'static str {
        match self {
            PromptKind::Codegen => include_str!("../prompts/codegen.md"),
            PromptKind::CoderSystem => include_str!("../prompts/coder_system.md"),
            PromptKind::QaScript => include_str!("../prompts/qa_script.md"),
            PromptKind::QaQuestion => include_str!("../prompts/qa_question.md"),
            PromptKind::QaConsistency => include_str!("../prompts/qa_consistency.md"),
            PromptKind::CotDistill => include_str!("../prompts/cot_distill.md"),
        }
    }
}

pub const CHART_CODE: &str = "{chart code}";
pub const SCRIPT: &str = "{generated_python_code}";
pub const GENERATED_QUESTION: &str = "{generated_question}";
pub const QUESTION: &str = "{question}";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("override for {kind:?} lacks placeholder {placeholder}")]
    MissingPlaceholder {
        kind: PromptKind,
        placeholder: &'static str,
    },
    #[error("cannot read prompt override {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Template set with optional per-kind overrides.
#[derive(Debug, Clone, Default)]
pub struct PromptCatalog {
    overrides: BTreeMap<PromptKind, String>,
}

impl PromptCatalog {
    pub fn packaged() -> Self {
        Self::default()
    }

    pub fn set_override(&mut self, kind: PromptKind, text: String) -> Result<(), PromptError> {
        for &placeholder in kind.placeholders() {
            if !text.contains(placeholder) {
                return Err(PromptError::MissingPlaceholder { kind, placeholder });
            }
        }
        self.overrides.insert(kind, text);
        Ok(())
    }

    pub fn load_override(&mut self, kind: PromptKind, path: &Path) -> Result<(), PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.set_override(kind, text)
    }

    pub fn template(&self, kind: PromptKind) -> &str {
        self.overrides
            .get(&kind)
            .map(String::as_str)
            .unwrap_or_else(|| kind.packaged())
    }

    /// Fills the template's placeholders in one pass, so substituted text is
    /// never itself rescanned.
    pub fn render(&self, kind: PromptKind, values: &[(&str, &str)]) -> String {
        substitute(self.template(kind), values)
    }
}

pub fn substitute(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (key, value) in values {
            if let Some(after) = tail.strip_prefix(key) {
                out.push_str(value);
                rest = after;
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packaged_templates_carry_their_placeholders() {
        let c = PromptCatalog::packaged();
        for kind in PromptKind::ALL {
            let t = c.template(kind);
            assert!(!t.trim().is_empty());
            for p in kind.placeholders() {
                assert_eq!(t.matches(p).count(), 1, "{kind:?} {p}");
            }
        }
        assert!(c
            .template(PromptKind::Codegen)
            .contains("save the figure as 'image.png'"));
        assert!(c
            .template(PromptKind::CoderSystem)
            .starts_with("## Role\nYou are a Python visualization expert."));
    }

    #[test]
    fn substitution_is_single_pass() {
        let out = substitute(
            "A {chart code} B {generated_python_code}",
            &[(CHART_CODE, "x = '{generated_python_code}'"), (SCRIPT, "S")],
        );
        assert_eq!(out, "A x = '{generated_python_code}' B S");
        assert_eq!(substitute("{a} {", &[]), "{a} {");
    }

    #[test]
    fn overrides_must_keep_placeholders() {
        let mut c = PromptCatalog::packaged();
        assert!(c
            .set_override(PromptKind::QaQuestion, "only {chart code}".into())
            .is_err());
        c.set_override(PromptKind::CotDistill, "Q: {question}".into())
            .unwrap();
        assert_eq!(
            c.render(PromptKind::CotDistill, &[(QUESTION, "why?")]),
            "Q: why?"
        );
    }
}
