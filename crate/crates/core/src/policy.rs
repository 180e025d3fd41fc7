//! Decision policies: window statistics in, stream configuration out.
//!
//! The rule policy picks the rung from the average inbound rate and sizes
//! the buffer from the average latency. [`Hysteresis`] sits after any
//! policy and holds the current rung through transient dips.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::Fluctuation;
use crate::model::{
    BitrateLadder, Decision, DecisionSource, Reason, Resolution, StreamConfig, WindowStats,
};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(&'static str),
    #[error("unknown rung {0:?}")]
    UnknownRung(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulePolicyConfig {
    pub ladder: BitrateLadder,
    pub latency_threshold_ms: f64,
    /// Buffer, in media seconds, when latency is at or below the threshold.
    pub base_buffer_s: f64,
    /// Media seconds added per 100 ms of latency above the threshold.
    pub buffer_growth_per_100ms: f64,
    pub buffer_bounds_s: (f64, f64),
}

impl Default for RulePolicyConfig {
    fn default() -> Self {
        Self {
            ladder: BitrateLadder::default(),
            latency_threshold_ms: 100.0,
            base_buffer_s: 2.0,
            buffer_growth_per_100ms: 1.0,
            buffer_bounds_s: (2.0, 10.0),
        }
    }
}

impl RulePolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let (min, max) = self.buffer_bounds_s;
        let finite = [
            self.latency_threshold_ms,
            self.base_buffer_s,
            self.buffer_growth_per_100ms,
            min,
            max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(PolicyError::InvalidConfig("values must be finite"));
        }
        if self.latency_threshold_ms <= 0.0 || self.base_buffer_s <= 0.0 || min <= 0.0 {
            return Err(PolicyError::InvalidConfig(
                "threshold, base buffer and bounds must be positive",
            ));
        }
        // zero growth is allowed: it is the fixed-buffer baseline
        if self.buffer_growth_per_100ms < 0.0 {
            return Err(PolicyError::InvalidConfig(
                "buffer growth must not be negative",
            ));
        }
        if !(min <= self.base_buffer_s && self.base_buffer_s <= max) {
            return Err(PolicyError::InvalidConfig("need min <= base buffer <= max"));
        }
        Ok(())
    }

    /// Target buffer in media seconds for a window's average latency.
    pub fn buffer_seconds(&self, avg_latency_ms: Option<f64>) -> (f64, Reason) {
        match avg_latency_ms {
            None => (self.base_buffer_s, Reason::LatencyAbsent),
            Some(l) if l <= self.latency_threshold_ms => (self.base_buffer_s, Reason::LatencyOk),
            Some(l) => {
                let excess = (l - self.latency_threshold_ms) / 100.0;
                let (min, max) = self.buffer_bounds_s;
                let s =
                    (self.base_buffer_s + self.buffer_growth_per_100ms * excess).clamp(min, max);
                (s, Reason::LatencyHigh)
            }
        }
    }

    /// Initial configuration: lowest rung at the base buffer.
    pub fn initial_config(&self) -> StreamConfig {
        let resolution = self.ladder.lowest().clone();
        StreamConfig {
            buffer_target_bytes: resolution.bytes_for_seconds(self.base_buffer_s),
            resolution,
        }
    }
}

/// Rung from the inbound rate, buffer from the latency.
pub fn rule_decide(cfg: &RulePolicyConfig, stats: &WindowStats) -> Decision {
    let resolution = cfg.ladder.lookup(stats.avg_kbps_in).clone();
    let (buffer_s, reason) = cfg.buffer_seconds(stats.avg_latency_ms);
    Decision {
        config: StreamConfig {
            buffer_target_bytes: resolution.bytes_for_seconds(buffer_s),
            resolution,
        },
        source: DecisionSource::RuleBased,
        reason,
        decided_at_s: stats.window_end_s,
    }
}

/// A policy consulted once per window.
pub trait Decide {
    fn decide(&mut self, stats: &WindowStats, current: &StreamConfig) -> Decision;
}

#[derive(Debug, Clone)]
pub struct RulePolicy {
    pub config: RulePolicyConfig,
}

impl Decide for RulePolicy {
    fn decide(&mut self, stats: &WindowStats, _current: &StreamConfig) -> Decision {
        rule_decide(&self.config, stats)
    }
}

/// Always the same rung; buffer sized like the rule policy.
#[derive(Debug, Clone)]
pub struct FixedPolicy {
    pub config: RulePolicyConfig,
    pub resolution: Resolution,
}

impl FixedPolicy {
    pub fn new(config: RulePolicyConfig, label: &str) -> Result<Self, PolicyError> {
        let resolution = config
            .ladder
            .get(label)
            .cloned()
            .ok_or_else(|| PolicyError::UnknownRung(label.to_string()))?;
        Ok(Self { config, resolution })
    }

    pub fn initial_config(&self) -> StreamConfig {
        StreamConfig {
            buffer_target_bytes: self.resolution.bytes_for_seconds(self.config.base_buffer_s),
            resolution: self.resolution.clone(),
        }
    }
}

impl Decide for FixedPolicy {
    fn decide(&mut self, stats: &WindowStats, _current: &StreamConfig) -> Decision {
        let (buffer_s, _) = self.config.buffer_seconds(stats.avg_latency_ms);
        Decision {
            config: StreamConfig {
                buffer_target_bytes: self.resolution.bytes_for_seconds(buffer_s),
                resolution: self.resolution.clone(),
            },
            source: DecisionSource::RuleBased,
            reason: Reason::Fixed,
            decided_at_s: stats.window_end_s,
        }
    }
}

/// Re-expresses `config`'s buffer (same media seconds) at another rung.
pub fn rebase_buffer(config: &StreamConfig, resolution: &Resolution) -> StreamConfig {
    StreamConfig {
        buffer_target_bytes: resolution
            .bytes_for_seconds(config.buffer_target_s())
            .max(1),
        resolution: resolution.clone(),
    }
}

/// Holds the current rung unless a change is backed by a sustained shift.
///
/// A candidate passes when it keeps the current rung, when the level has
/// `Shifted`, or when the level is `Stable` and the previous window already
/// proposed the same rung. Otherwise the current rung is kept and the
/// candidate's buffer (in media seconds) is carried over to it.
#[derive(Debug, Clone)]
pub struct Hysteresis {
    current: StreamConfig,
    last_candidate: Option<String>,
}

impl Hysteresis {
    pub fn new(current: StreamConfig) -> Self {
        Self {
            current,
            last_candidate: None,
        }
    }

    pub fn current(&self) -> &StreamConfig {
        &self.current
    }

    /// Forces the current configuration (user override).
    pub fn set_current(&mut self, config: StreamConfig) {
        self.current = config;
        self.last_candidate = None;
    }

    pub fn filter(&mut self, candidate: Decision, fluct: Fluctuation) -> Decision {
        let label = candidate.config.resolution.label.clone();
        let sustained = self.last_candidate.as_deref() == Some(label.as_str());
        self.last_candidate = Some(label);

        let same_rung = candidate.config.resolution == self.current.resolution;
        let pass = same_rung
            || match fluct {
                Fluctuation::Shifted => true,
                Fluctuation::Stable => sustained,
                Fluctuation::Transient => false,
            };
        let out = if pass {
            candidate
        } else {
            Decision {
                config: rebase_buffer(&candidate.config, &self.current.resolution),
                reason: Reason::HysteresisHold,
                ..candidate
            }
        };
        self.current = out.config.clone();
        out
    }
}
