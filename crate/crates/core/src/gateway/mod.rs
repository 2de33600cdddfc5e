//! Client layer for chat-completion and embedding endpoints.
//!
//! Requests go out as chat-completions-compatible JSON. A [`Transport`]
//! carries them: plain HTTP for real servers, or the in-process
//! [`MockBackend`] for tests and fixtures. The [`Gateway`] adds per-endpoint
//! concurrency limits and retry with exponential backoff on top.

mod mock;
mod transport;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use mock::{MockBackend, MockMatch, MockResponse, MockRule, MockScript, RecordedRequest};
pub use transport::{HttpReply, HttpTransport, RoutingTransport, Transport, TransportError};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidInput(String),
    #[error(
        "retries exhausted after {attempts} attempt(s); last status {last_status:?}: {detail}"
    )]
    Exhausted {
        attempts: u32,
        last_status: Option<u16>,
        detail: String,
    },
    #[error("endpoint rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("mock script has no rule for this request: {0}")]
    ScriptGap(String),
}

impl GatewayError {
    /// Transport-level failures a stage should record and move past.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            GatewayError::Exhausted { .. } | GatewayError::Status { .. } | GatewayError::Auth(_)
        )
    }
}

/// Secret string that never shows up in debug output.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff_ms: 250,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `min(base·2^retry, max)`.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(63)).unwrap_or(u64::MAX);
        let ms = self
            .base_backoff_ms
            .saturating_mul(factor)
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_id: String,
    pub auth_token: Option<Secret>,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
    pub timeout_s: f64,
    /// Inputs per embeddings request.
    pub embed_batch_size: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            auth_token: None,
            max_parallel: 8,
            retry: RetryPolicy::default(),
            timeout_s: 600.0,
            embed_batch_size: 32,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel < 1 {
            return Err(GatewayError::InvalidInput(
                "max_parallel must be ≥ 1".into(),
            ));
        }
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::InvalidInput(
                "max_attempts must be ≥ 1".into(),
            ));
        }
        if self.embed_batch_size < 1 {
            return Err(GatewayError::InvalidInput(
                "embed_batch_size must be ≥ 1".into(),
            ));
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err(GatewayError::InvalidInput("timeout_s must be > 0".into()));
        }
        Ok(())
    }

    fn limit_key(&self) -> String {
        format!("{}#{}", self.base_url, self.model_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Text(String),
    Image { bytes: Vec<u8>, media_type: String },
}

impl Part {
    pub fn png(bytes: Vec<u8>) -> Self {
        Part::Image {
            bytes,
            media_type: "image/png".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn has_image(&self) -> bool {
        self.parts.iter().any(|p| matches!(p, Part::Image { .. }))
    }
}

/// Sampling parameters carried by every chat request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPreset {
    pub temperature: f64,
    pub top_p: f64,
    /// 0 disables top-k and omits the field on the wire.
    #[serde(default)]
    pub top_k: u32,
    pub max_tokens: u32,
}

impl SamplingPreset {
    /// Image-to-code reconstruction rollouts.
    pub const ROLLOUT: Self = Self {
        temperature: 1.0,
        top_p: 1.0,
        top_k: 0,
        max_tokens: 8192,
    };
    /// Chart-coder sampling.
    pub const CODER: Self = Self {
        temperature: 1.0,
        top_p: 0.95,
        top_k: 20,
        max_tokens: 4096,
    };
    /// QA synthesis, consistency checks and trace distillation.
    pub const REASONING: Self = Self {
        temperature: 0.6,
        top_p: 0.95,
        top_k: 20,
        max_tokens: 32768,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub sampling: SamplingPreset,
    pub n_samples: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>, sampling: SamplingPreset) -> Self {
        Self {
            messages,
            sampling,
            n_samples: 1,
            seed: None,
        }
    }

    pub fn samples(mut self, n: u32) -> Self {
        self.n_samples = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn has_image(&self) -> bool {
        self.messages.iter().any(Message::has_image)
    }

    fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidInput(m.to_string()));
        if self.messages.is_empty() {
            return bad("at least one message is required");
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::User && m.has_image())
        {
            return bad("image parts are only allowed in user messages");
        }
        if self.n_samples < 1 {
            return bad("n_samples must be ≥ 1");
        }
        let s = &self.sampling;
        if s.temperature.is_nan() || s.temperature < 0.0 {
            return bad("temperature must be ≥ 0");
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        Ok(())
    }

    fn to_wire(&self, model: &str) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| {
                let content: Vec<Value> = m.parts.iter().map(part_to_wire).collect();
                json!({ "role": m.role, "content": content })
            })
            .collect();
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": self.sampling.temperature,
            "top_p": self.sampling.top_p,
            "max_tokens": self.sampling.max_tokens,
            "n": self.n_samples,
        });
        if self.sampling.top_k > 0 {
            body["top_k"] = json!(self.sampling.top_k);
        }
        if let Some(seed) = self.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

pub fn data_url(media_type: &str, bytes: &[u8]) -> String {
    format!(
        "data:{media_type};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}

/// Decodes a base64 `data:` URL back to bytes.
pub fn decode_data_url(url: &str) -> Option<Vec<u8>> {
    let rest = url.strip_prefix("data:")?;
    let (_, payload) = rest.split_once(";base64,")?;
    base64::engine::general_purpose::STANDARD
        .decode(payload)
        .ok()
}

fn part_to_wire(p: &Part) -> Value {
    match p {
        Part::Text(t) => json!({ "type": "text", "text": t }),
        Part::Image { bytes, media_type } => json!({
            "type": "image_url",
            "image_url": { "url": data_url(media_type, bytes) }
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EmbedInput {
    Text(String),
    Image(Vec<u8>),
}

impl EmbedInput {
    fn to_wire(&self) -> Value {
        match self {
            EmbedInput::Text(t) => Value::String(t.clone()),
            EmbedInput::Image(b) => Value::String(data_url("image/png", b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model_id: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One scheduled retry.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryEvent {
    pub endpoint: String,
    pub attempt: u32,
    pub status: Option<u16>,
    pub delay: Duration,
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Shareable client. Cheap to clone via `Arc`.
pub struct Gateway {
    transport: Arc<dyn Transport>,
    limits: Mutex<HashMap<String, Arc<Semaphore>>>,
    sleeper: Sleeper,
    retries: Mutex<Vec<RetryEvent>>,
    requests: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("requests", &self.requests.load(Ordering::Relaxed))
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self {
            transport,
            limits: Mutex::new(HashMap::new()),
            sleeper: Arc::new(std::thread::sleep),
            retries: Mutex::new(Vec::new()),
            requests: AtomicU64::new(0),
        }
    }

    /// Replaces the backoff sleep, e.g. to record delays without waiting.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn retry_log(&self) -> Vec<RetryEvent> {
        self.retries.lock().unwrap().clone()
    }

    /// Requests issued, counting every retry attempt.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn chat(
        &self,
        cfg: &EndpointConfig,
        req: &ChatRequest,
    ) -> Result<Vec<String>, GatewayError> {
        cfg.validate()?;
        req.validate()?;
        let body = req.to_wire(&cfg.model_id);
        let reply = self.post_with_retry(cfg, "/chat/completions", &body)?;
        let choices = reply
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Protocol("missing `choices` array".into()))?;
        let texts = choices
            .iter()
            .map(|c| {
                c.pointer("/message/content")
                    .and_then(Value::as_str)
                    .map(str::to_owned)
                    .ok_or_else(|| GatewayError::Protocol("choice without message.content".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if texts.len() != req.n_samples as usize {
            return Err(GatewayError::Protocol(format!(
                "expected {} choices, got {}",
                req.n_samples,
                texts.len()
            )));
        }
        Ok(texts)
    }

    pub fn embed(
        &self,
        cfg: &EndpointConfig,
        inputs: &[EmbedInput],
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        cfg.validate()?;
        if inputs.is_empty() {
            return Err(GatewayError::InvalidInput("no inputs to embed".into()));
        }
        let mut out = Vec::with_capacity(inputs.len());
        for batch in inputs.chunks(cfg.embed_batch_size) {
            let body = json!({
                "model": cfg.model_id,
                "input": batch.iter().map(EmbedInput::to_wire).collect::<Vec<_>>(),
            });
            let reply = self.post_with_retry(cfg, "/embeddings", &body)?;
            let data = reply
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Protocol("missing `data` array".into()))?;
            if data.len() != batch.len() {
                return Err(GatewayError::Protocol(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    data.len()
                )));
            }
            let mut slots: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
            for (pos, item) in data.iter().enumerate() {
                let idx = item
                    .get("index")
                    .and_then(Value::as_u64)
                    .map(|i| i as usize)
                    .unwrap_or(pos);
                let values = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| GatewayError::Protocol("item without embedding".into()))?
                    .iter()
                    .map(|v| v.as_f64().filter(|f| f.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| GatewayError::Protocol("non-numeric embedding entry".into()))?;
                let slot = slots
                    .get_mut(idx)
                    .ok_or_else(|| GatewayError::Protocol(format!("index {idx} out of range")))?;
                *slot = Some(values);
            }
            for values in slots {
                let values = values
                    .ok_or_else(|| GatewayError::Protocol("missing embedding index".into()))?;
                out.push(EmbeddingVector {
                    values,
                    model_id: cfg.model_id.clone(),
                });
            }
        }
        if let Some(first) = out.first() {
            let d = first.dim();
            if out.iter().any(|v| v.dim() != d) {
                return Err(GatewayError::Protocol("embedding dimensions differ".into()));
            }
        }
        Ok(out)
    }

    fn limiter(&self, cfg: &EndpointConfig) -> Arc<Semaphore> {
        let mut limits = self.limits.lock().unwrap();
        limits
            .entry(cfg.limit_key())
            .or_insert_with(|| Arc::new(Semaphore::new(cfg.max_parallel)))
            .clone()
    }

    fn post_with_retry(
        &self,
        cfg: &EndpointConfig,
        path: &str,
        body: &Value,
    ) -> Result<Value, GatewayError> {
        let limiter = self.limiter(cfg);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.requests.fetch_add(1, Ordering::Relaxed);
            let outcome = {
                let _permit = limiter.acquire();
                self.transport.post(cfg, path, body)
            };
            let (status, detail) = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return serde_json::from_str(&reply.body)
                        .map_err(|e| GatewayError::Protocol(format!("invalid JSON body: {e}")));
                }
                Ok(reply) => match reply.status {
                    401 | 403 => return Err(GatewayError::Auth(reply.status)),
                    s if s == 429 || s >= 500 => (Some(s), truncate(&reply.body, 512)),
                    s => {
                        return Err(GatewayError::Status {
                            status: s,
                            body: truncate(&reply.body, 512),
                        })
                    }
                },
                Err(TransportError::ScriptGap(msg)) => return Err(GatewayError::ScriptGap(msg)),
                Err(e) => (None, e.to_string()),
            };
            if attempt >= cfg.retry.max_attempts {
                return Err(GatewayError::Exhausted {
                    attempts: attempt,
                    last_status: status,
                    detail,
                });
            }
            let delay = cfg.retry.delay(attempt - 1);
            log::debug!(
                "{} {path}: retry {attempt} after {delay:?} ({detail})",
                cfg.model_id
            );
            self.retries.lock().unwrap().push(RetryEvent {
                endpoint: cfg.model_id.clone(),
                attempt,
                status,
                delay,
            });
            (self.sleeper)(delay);
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &s[..end])
}
