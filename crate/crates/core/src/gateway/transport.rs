use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

use super::{EndpointConfig, MockBackend};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("{0}")]
    ScriptGap(String),
}

/// Moves one JSON POST to an endpoint and back.
pub trait Transport: Send + Sync {
    fn post(
        &self,
        cfg: &EndpointConfig,
        path: &str,
        body: &Value,
    ) -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(
        &self,
        cfg: &EndpointConfig,
        path: &str,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        let url = format!("{}{}", cfg.base_url.trim_end_matches('/'), path);
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(cfg.timeout_s))
            .build();
        let mut req = agent.post(&url).set("Content-Type", "application/json");
        if let Some(token) = &cfg.auth_token {
            req = req.set("Authorization", &format!("Bearer {}", token.expose()));
        }
        match req.send_json(body) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp
                    .into_string()
                    .map_err(|e| TransportError::Network(e.to_string()))?;
                Ok(HttpReply { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => Ok(HttpReply {
                status,
                body: resp.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    Err(TransportError::Timeout)
                } else {
                    Err(TransportError::Network(msg))
                }
            }
        }
    }
}

/// Sends `mock://` endpoints to an in-process mock and everything else over
/// HTTP.
pub struct RoutingTransport {
    http: HttpTransport,
    mock: Option<Arc<MockBackend>>,
}

impl RoutingTransport {
    pub fn new(mock: Option<Arc<MockBackend>>) -> Self {
        Self {
            http: HttpTransport,
            mock,
        }
    }
}

impl Transport for RoutingTransport {
    fn post(
        &self,
        cfg: &EndpointConfig,
        path: &str,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        if cfg.base_url.starts_with("mock:") {
            match &self.mock {
                Some(m) => m.post(cfg, path, body),
                None => Err(TransportError::Network(format!(
                    "{} is a mock endpoint but no mock script is loaded",
                    cfg.base_url
                ))),
            }
        } else {
            self.http.post(cfg, path, body)
        }
    }
}
