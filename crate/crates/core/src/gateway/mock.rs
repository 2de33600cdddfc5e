//! Deterministic scripted endpoint.
//!
//! A script is an ordered list of rules. Each request is matched against the
//! rules in order; the first rule whose matcher fits, whose response kind
//! suits the request and whose `repeat` budget is not used up answers it.
//!
//! Chat requests are matched on the concatenated text of every message plus
//! the raw bytes of attached images (decoded lossily), so markers embedded in
//! PNG text chunks are visible to `substring`. Embedding requests are matched
//! input by input.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::transport::{HttpReply, Transport, TransportError};
use super::{decode_data_url, EndpointConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockMatch {
    pub substring: Option<String>,
    /// 0-based ordinal among requests of the same kind (chat or embed).
    pub index: Option<u64>,
    pub model: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texts: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vectors: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(rename = "match", default)]
    pub matcher: MockMatch,
    pub respond: MockResponse,
    /// Maximum number of uses; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<u32>,
}

impl MockRule {
    pub fn texts(substring: &str, texts: Vec<String>) -> Self {
        Self {
            matcher: MockMatch {
                substring: Some(substring.to_string()),
                ..MockMatch::default()
            },
            respond: MockResponse {
                texts: Some(texts),
                ..MockResponse::default()
            },
            repeat: None,
        }
    }

    pub fn vector(substring: &str, v: Vec<f64>) -> Self {
        Self {
            matcher: MockMatch {
                substring: Some(substring.to_string()),
                ..MockMatch::default()
            },
            respond: MockResponse {
                vectors: Some(vec![v]),
                ..MockResponse::default()
            },
            repeat: None,
        }
    }

    pub fn for_model(mut self, model: &str) -> Self {
        self.matcher.model = Some(model.to_string());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.matcher.seed = Some(seed);
        self
    }

    fn kind_count(&self) -> usize {
        let r = &self.respond;
        r.texts.is_some() as usize + r.vectors.is_some() as usize + r.http_status.is_some() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
    /// Unmatched requests fail with a scripted-gap error instead of getting
    /// a default answer.
    pub strict: bool,
    /// Dimension of the content-hash vectors served to unmatched embedding
    /// inputs.
    pub default_dim: usize,
    /// Artificial per-request latency.
    pub latency_ms: u64,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            strict: false,
            default_dim: 8,
            latency_ms: 0,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Rules(Vec<MockRule>),
    Full(MockScript),
}

impl MockScript {
    /// Accepts either a bare rule list or the full object form.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let parsed: ScriptFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let script = match parsed {
            ScriptFile::Rules(rules) => MockScript {
                rules,
                ..MockScript::default()
            },
            ScriptFile::Full(s) => s,
        };
        for (i, r) in script.rules.iter().enumerate() {
            if r.kind_count() != 1 {
                return Err(format!(
                    "rule {i}: respond must set exactly one of texts, vectors, http_status"
                ));
            }
            if matches!(&r.respond.vectors, Some(v) if v.is_empty())
                || matches!(&r.respond.texts, Some(t) if t.is_empty())
            {
                return Err(format!("rule {i}: empty response list"));
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock script serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: Value,
}

#[derive(Debug, Default)]
struct State {
    uses: Vec<u32>,
    chat_ordinal: u64,
    embed_ordinal: u64,
    requests: Vec<RecordedRequest>,
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    state: Mutex<State>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Chat,
    Embed,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let uses = vec![0; script.rules.len()];
        Self {
            script,
            state: Mutex::new(State {
                uses,
                ..State::default()
            }),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        }
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().requests.clone()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().unwrap().requests.len()
    }

    pub fn chat_calls(&self) -> usize {
        self.count(Kind::Chat)
    }

    pub fn embed_calls(&self) -> usize {
        self.count(Kind::Embed)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn count(&self, kind: Kind) -> usize {
        self.state
            .lock()
            .unwrap()
            .requests
            .iter()
            .filter(|r| kind_of(&r.path) == Some(kind))
            .count()
    }

    /// Picks and consumes the first usable rule.
    #[allow(clippy::too_many_arguments)]
    fn take_rule(
        &self,
        st: &mut State,
        kind: Kind,
        haystack: &str,
        ordinal: u64,
        model: &str,
        seed: Option<u64>,
        allow_status: bool,
    ) -> Option<(usize, u32)> {
        for (i, rule) in self.script.rules.iter().enumerate() {
            let r = &rule.respond;
            let fits_kind = match kind {
                Kind::Chat => r.texts.is_some() || (allow_status && r.http_status.is_some()),
                Kind::Embed => r.vectors.is_some() || (allow_status && r.http_status.is_some()),
            };
            if !fits_kind || rule.repeat.is_some_and(|n| st.uses[i] >= n) {
                continue;
            }
            let m = &rule.matcher;
            if m.substring
                .as_deref()
                .is_some_and(|s| !haystack.contains(s))
                || m.index.is_some_and(|ix| ix != ordinal)
                || m.model.as_deref().is_some_and(|mm| mm != model)
                || m.seed.is_some_and(|sd| Some(sd) != seed)
            {
                continue;
            }
            let used = st.uses[i];
            st.uses[i] += 1;
            return Some((i, used));
        }
        None
    }

    fn handle(&self, path: &str, body: &Value) -> Result<HttpReply, TransportError> {
        let kind = kind_of(path)
            .ok_or_else(|| TransportError::ScriptGap(format!("unsupported path {path}")))?;
        let model = body
            .get("model")
            .and_then(Value::as_str)
            .unwrap_or_default();
        let mut st = self.state.lock().unwrap();
        st.requests.push(RecordedRequest {
            path: path.to_string(),
            body: body.clone(),
        });
        match kind {
            Kind::Chat => {
                let ordinal = st.chat_ordinal;
                st.chat_ordinal += 1;
                let haystack = chat_haystack(body);
                let seed = body.get("seed").and_then(Value::as_u64);
                let n = body.get("n").and_then(Value::as_u64).unwrap_or(1) as usize;
                match self.take_rule(&mut st, kind, &haystack, ordinal, model, seed, true) {
                    Some((i, _)) => {
                        let r = &self.script.rules[i].respond;
                        if let Some(status) = r.http_status {
                            return Ok(status_reply(status));
                        }
                        let texts = r.texts.as_ref().expect("validated");
                        let choices: Vec<Value> = (0..n)
                            .map(|j| {
                                json!({"index": j, "message": {"role": "assistant", "content": texts[j % texts.len()]}})
                            })
                            .collect();
                        Ok(ok_reply(json!({ "choices": choices })))
                    }
                    None if self.script.strict => Err(TransportError::ScriptGap(format!(
                        "chat #{ordinal} for model {model:?}: {}",
                        preview(&haystack)
                    ))),
                    None => {
                        let choices: Vec<Value> = (0..n)
                            .map(|j| json!({"index": j, "message": {"role": "assistant", "content": ""}}))
                            .collect();
                        Ok(ok_reply(json!({ "choices": choices })))
                    }
                }
            }
            Kind::Embed => {
                let ordinal = st.embed_ordinal;
                st.embed_ordinal += 1;
                let inputs: Vec<String> = body
                    .get("input")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().map(input_haystack).collect())
                    .unwrap_or_default();
                // a failure injection answers the whole batch
                for h in &inputs {
                    if let Some(status) = self.peek_status(&mut st, h, ordinal, model) {
                        return Ok(status_reply(status));
                    }
                }
                let mut data = Vec::with_capacity(inputs.len());
                for (idx, h) in inputs.iter().enumerate() {
                    let v = match self.take_rule(&mut st, kind, h, ordinal, model, None, false) {
                        Some((i, used)) => {
                            let vs = self.script.rules[i]
                                .respond
                                .vectors
                                .as_ref()
                                .expect("validated");
                            vs[used as usize % vs.len()].clone()
                        }
                        None if self.script.strict => {
                            return Err(TransportError::ScriptGap(format!(
                                "embedding input {idx} for model {model:?}: {}",
                                preview(h)
                            )))
                        }
                        None => hash_vector(h.as_bytes(), self.script.default_dim),
                    };
                    data.push(json!({ "index": idx, "embedding": v }));
                }
                Ok(ok_reply(json!({ "data": data })))
            }
        }
    }

    fn peek_status(
        &self,
        st: &mut State,
        haystack: &str,
        ordinal: u64,
        model: &str,
    ) -> Option<u16> {
        for (i, rule) in self.script.rules.iter().enumerate() {
            let Some(status) = rule.respond.http_status else {
                continue;
            };
            if rule.repeat.is_some_and(|n| st.uses[i] >= n) {
                continue;
            }
            let m = &rule.matcher;
            if m.substring
                .as_deref()
                .is_some_and(|s| !haystack.contains(s))
                || m.index.is_some_and(|ix| ix != ordinal)
                || m.model.as_deref().is_some_and(|mm| mm != model)
            {
                continue;
            }
            st.uses[i] += 1;
            return Some(status);
        }
        None
    }
}

impl Transport for MockBackend {
    fn post(
        &self,
        _cfg: &EndpointConfig,
        path: &str,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if self.script.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.script.latency_ms));
        }
        let out = self.handle(path, body);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

fn kind_of(path: &str) -> Option<Kind> {
    if path.ends_with("/chat/completions") {
        Some(Kind::Chat)
    } else if path.ends_with("/embeddings") {
        Some(Kind::Embed)
    } else {
        None
    }
}

fn chat_haystack(body: &Value) -> String {
    let mut out = String::new();
    for msg in body
        .get("messages")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
    {
        for part in msg
            .get("content")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            if let Some(t) = part.get("text").and_then(Value::as_str) {
                out.push_str(t);
                out.push('\n');
            } else if let Some(url) = part.pointer("/image_url/url").and_then(Value::as_str) {
                if let Some(bytes) = decode_data_url(url) {
                    out.push_str(&String::from_utf8_lossy(&bytes));
                    out.push('\n');
                }
            }
        }
    }
    out
}

fn input_haystack(v: &Value) -> String {
    let s = v.as_str().unwrap_or_default();
    match decode_data_url(s) {
        Some(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
        None => s.to_string(),
    }
}

fn preview(s: &str) -> String {
    let flat: String = s.chars().filter(|c| !c.is_control()).take(80).collect();
    format!("{flat:?}")
}

fn ok_reply(v: Value) -> HttpReply {
    HttpReply {
        status: 200,
        body: v.to_string(),
    }
}

fn status_reply(status: u16) -> HttpReply {
    HttpReply {
        status,
        body: json!({"error": {"message": "injected failure", "code": status}}).to_string(),
    }
}

/// Unit vector derived from a content hash.
pub(crate) fn hash_vector(content: &[u8], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let mut counter = 0u32;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(counter.to_le_bytes());
        h.update(content);
        for chunk in h.finalize().chunks(2) {
            if out.len() == dim {
                break;
            }
            let raw = u16::from_le_bytes([chunk[0], chunk[1]]) as f64;
            out.push(raw / 32767.5 - 1.0);
        }
        counter += 1;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ambiguous_rules() {
        let err = MockScript::from_json(r#"[{"respond":{"texts":["a"],"http_status":500}}]"#)
            .unwrap_err();
        assert!(err.contains("exactly one"));
        assert!(MockScript::from_json(r#"[{"respond":{}}]"#).is_err());
        assert!(MockScript::from_json(r#"[{"respond":{"texts":[]}}]"#).is_err());
    }

    #[test]
    fn accepts_object_form() {
        let s = MockScript::from_json(r#"{"strict":true,"rules":[{"respond":{"texts":["a"]}}]}"#)
            .unwrap();
        assert!(s.strict);
        assert_eq!(s.default_dim, 8);
    }

    #[test]
    fn strict_gap_is_reported() {
        let mock = MockBackend::new(MockScript {
            strict: true,
            ..MockScript::default()
        });
        let cfg = EndpointConfig::new("mock://", "m");
        let body = json!({"model": "m", "messages": [{"role":"user","content":[{"type":"text","text":"hello"}]}], "n": 1});
        match mock.post(&cfg, "/chat/completions", &body) {
            Err(TransportError::ScriptGap(msg)) => assert!(msg.contains("hello")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn image_bytes_are_searchable() {
        let script = MockScript::from_json(
            r#"[{"match":{"substring":"marker-7"},"respond":{"texts":["seen"]}}]"#,
        )
        .unwrap();
        let mock = MockBackend::new(script);
        let cfg = EndpointConfig::new("mock://", "m");
        let url = super::super::data_url("image/png", b"\x89PNG....marker-7....");
        let body = json!({"model": "m", "messages": [{"role":"user","content":[{"type":"image_url","image_url":{"url": url}}]}], "n": 1});
        let reply = mock.post(&cfg, "/chat/completions", &body).unwrap();
        assert!(reply.body.contains("seen"));
    }

    #[test]
    fn index_model_and_seed_matchers() {
        let script = MockScript::from_json(
            r#"[{"match":{"index":1},"respond":{"texts":["second"]}},
                {"match":{"model":"b","seed":5},"respond":{"texts":["b5"]}}]"#,
        )
        .unwrap();
        let mock = MockBackend::new(script);
        let cfg = EndpointConfig::new("mock://", "m");
        let body =
            |model: &str, seed: u64| json!({"model": model, "seed": seed, "messages": [], "n": 1});
        let text = |r: HttpReply| {
            serde_json::from_str::<Value>(&r.body).unwrap()["choices"][0]["message"]["content"]
                .clone()
        };
        assert_eq!(
            text(mock.post(&cfg, "/chat/completions", &body("a", 1)).unwrap()),
            ""
        );
        assert_eq!(
            text(mock.post(&cfg, "/chat/completions", &body("a", 1)).unwrap()),
            "second"
        );
        assert_eq!(
            text(mock.post(&cfg, "/chat/completions", &body("b", 5)).unwrap()),
            "b5"
        );
        assert_eq!(
            text(mock.post(&cfg, "/chat/completions", &body("b", 6)).unwrap()),
            ""
        );
    }

    #[test]
    fn hash_vectors_are_unit_and_deterministic() {
        let a = hash_vector(b"abc", 16);
        assert_eq!(a, hash_vector(b"abc", 16));
        assert_ne!(a, hash_vector(b"abd", 16));
        let n: f64 = a.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
