//! Client side of the advisor protocol.
//!
//! The advisor is an external service that receives window averages and
//! answers with a rung and a buffer size in bytes. Any failure (timeout,
//! transport error, a reply that names an unknown rung or a non-positive
//! buffer) falls back to the rule policy so the session keeps streaming.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BitrateLadder, Decision, DecisionSource, Reason, StreamConfig, WindowStats};
use crate::policy::{rule_decide, Decide, RulePolicyConfig};
use crate::probe::transport_is_timeout;

/// Replies above this many bytes are rejected as invalid.
pub const DEFAULT_MAX_BUFFER_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorRequest {
    pub avg_latency_ms: Option<f64>,
    pub avg_kbps_in: f64,
    pub current_resolution: String,
    pub current_buffer_bytes: u64,
    pub ladder: Vec<String>,
}

impl AdvisorRequest {
    pub fn new(stats: &WindowStats, current: &StreamConfig, ladder: &BitrateLadder) -> Self {
        Self {
            avg_latency_ms: stats.avg_latency_ms,
            avg_kbps_in: stats.avg_kbps_in,
            current_resolution: current.resolution.label.clone(),
            current_buffer_bytes: current.buffer_target_bytes,
            ladder: ladder.labels(),
        }
    }
}

/// Reply as it travels on the wire; `buffer_bytes` is kept as a raw JSON
/// number so negative or fractional values reach validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorResponse {
    pub resolution: String,
    pub buffer_bytes: serde_json::Number,
}

impl AdvisorResponse {
    pub fn new(resolution: impl Into<String>, buffer_bytes: u64) -> Self {
        Self {
            resolution: resolution.into(),
            buffer_bytes: buffer_bytes.into(),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdvisorError {
    #[error("advisor timed out")]
    Timeout,
    #[error("advisor transport: {0}")]
    Transport(String),
    #[error("invalid advisor response: {0}")]
    InvalidResponse(String),
}

impl AdvisorError {
    pub fn reason(&self) -> Reason {
        match self {
            Self::Timeout => Reason::AdvisorTimeout,
            Self::Transport(_) => Reason::AdvisorTransport,
            Self::InvalidResponse(_) => Reason::InvalidResponse,
        }
    }
}

pub trait AdvisorTransport: Send + Sync {
    fn consult(
        &self,
        req: &AdvisorRequest,
        timeout: Duration,
    ) -> Result<AdvisorResponse, AdvisorError>;
}

/// JSON over HTTP POST.
#[derive(Debug, Clone)]
pub struct HttpAdvisor {
    url: String,
}

impl HttpAdvisor {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into() }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl AdvisorTransport for HttpAdvisor {
    fn consult(
        &self,
        req: &AdvisorRequest,
        timeout: Duration,
    ) -> Result<AdvisorResponse, AdvisorError> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let resp = match agent.post(&self.url).send_json(req) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => {
                return Err(AdvisorError::Transport(format!("HTTP status {code}")))
            }
            Err(ureq::Error::Transport(t)) if transport_is_timeout(&t) => {
                return Err(AdvisorError::Timeout)
            }
            Err(ureq::Error::Transport(t)) => return Err(AdvisorError::Transport(t.to_string())),
        };
        let body = resp.into_string().map_err(|e| match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => AdvisorError::Timeout,
            _ => AdvisorError::Transport(e.to_string()),
        })?;
        serde_json::from_str(&body).map_err(|e| AdvisorError::InvalidResponse(e.to_string()))
    }
}

/// Turns a reply into a configuration, or says why it is unusable.
pub fn validate_response(
    resp: &AdvisorResponse,
    ladder: &BitrateLadder,
    max_buffer_bytes: u64,
) -> Result<StreamConfig, AdvisorError> {
    let resolution = ladder.get(&resp.resolution).ok_or_else(|| {
        AdvisorError::InvalidResponse(format!("unknown rung {:?}", resp.resolution))
    })?;
    let bytes = resp
        .buffer_bytes
        .as_u64()
        .filter(|&b| b > 0 && b <= max_buffer_bytes)
        .ok_or_else(|| {
            AdvisorError::InvalidResponse(format!(
                "buffer_bytes {} out of range",
                resp.buffer_bytes
            ))
        })?;
    Ok(StreamConfig {
        resolution: resolution.clone(),
        buffer_target_bytes: bytes,
    })
}

/// Consults the advisor; on any failure returns the rule policy's answer
/// tagged `advisor-fallback` with the failure class as the reason.
pub fn advisor_decide<T: AdvisorTransport + ?Sized>(
    transport: &T,
    stats: &WindowStats,
    current: &StreamConfig,
    fallback: &RulePolicyConfig,
    timeout_ms: u64,
    max_buffer_bytes: u64,
) -> Decision {
    let req = AdvisorRequest::new(stats, current, &fallback.ladder);
    let outcome = transport
        .consult(&req, Duration::from_millis(timeout_ms))
        .and_then(|resp| validate_response(&resp, &fallback.ladder, max_buffer_bytes));
    match outcome {
        Ok(config) => Decision {
            config,
            source: DecisionSource::Advisor,
            reason: Reason::AdvisorOk,
            decided_at_s: stats.window_end_s,
        },
        Err(err) => {
            log::warn!(
                "advisor at t = {:.2} s: {err}; using rule policy",
                stats.window_end_s
            );
            Decision {
                source: DecisionSource::AdvisorFallback,
                reason: err.reason(),
                ..rule_decide(fallback, stats)
            }
        }
    }
}

pub struct AdvisorPolicy {
    pub transport: Box<dyn AdvisorTransport>,
    pub fallback: RulePolicyConfig,
    pub timeout_ms: u64,
    pub max_buffer_bytes: u64,
}

impl AdvisorPolicy {
    pub fn new(
        transport: Box<dyn AdvisorTransport>,
        fallback: RulePolicyConfig,
        timeout_ms: u64,
    ) -> Self {
        Self {
            transport,
            fallback,
            timeout_ms,
            max_buffer_bytes: DEFAULT_MAX_BUFFER_BYTES,
        }
    }
}

impl Decide for AdvisorPolicy {
    fn decide(&mut self, stats: &WindowStats, current: &StreamConfig) -> Decision {
        advisor_decide(
            self.transport.as_ref(),
            stats,
            current,
            &self.fallback,
            self.timeout_ms,
            self.max_buffer_bytes,
        )
    }
}
