//! Tumbling observation windows over probe samples, and the fluctuation
//! classifier that tells short dips from sustained shifts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NetworkSample, WindowStats};

/// Slack for comparing sample-time spans built from float timestamps.
const SPAN_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum AggregatorError {
    #[error("sample at t = {got} s does not follow t = {last} s")]
    NonMonotonicTimestamp { last: f64, got: f64 },
    #[error("window length must be positive, got {0}")]
    InvalidWindow(f64),
}

/// Collects samples and emits one [`WindowStats`] every `window_s` of
/// sample time.
///
/// The first window opens at the first sample's timestamp. A sample whose
/// timestamp reaches the window end closes the window (and is included in
/// it); the next window opens at that timestamp.
#[derive(Debug, Clone)]
pub struct Aggregator {
    window_s: f64,
    window_start: Option<f64>,
    last_t: Option<f64>,
    samples: Vec<NetworkSample>,
}

impl Aggregator {
    pub fn new(window_s: f64) -> Result<Self, AggregatorError> {
        if !(window_s.is_finite() && window_s > 0.0) {
            return Err(AggregatorError::InvalidWindow(window_s));
        }
        Ok(Self {
            window_s,
            window_start: None,
            last_t: None,
            samples: Vec::new(),
        })
    }

    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    pub fn push_sample(
        &mut self,
        sample: NetworkSample,
    ) -> Result<Option<WindowStats>, AggregatorError> {
        if let Some(last) = self.last_t {
            if !(sample.timestamp_s > last) {
                return Err(AggregatorError::NonMonotonicTimestamp {
                    last,
                    got: sample.timestamp_s,
                });
            }
        }
        let t = sample.timestamp_s;
        self.last_t = Some(t);
        let start = *self.window_start.get_or_insert(t);
        self.samples.push(sample);
        if t - start + SPAN_EPS < self.window_s {
            return Ok(None);
        }
        let stats = window_stats(start, t, &self.samples);
        self.samples.clear();
        self.window_start = Some(t);
        Ok(Some(stats))
    }

    /// Samples waiting for the current window to close.
    pub fn pending(&self) -> &[NetworkSample] {
        &self.samples
    }
}

fn window_stats(start: f64, end: f64, samples: &[NetworkSample]) -> WindowStats {
    let avg_kbps_in = samples.iter().map(|s| s.kbps_in).sum::<f64>() / samples.len() as f64;
    let latencies: Vec<f64> = samples.iter().filter_map(|s| s.latency_ms).collect();
    let avg_latency_ms = if latencies.is_empty() {
        None
    } else {
        Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
    };
    WindowStats {
        window_start_s: start,
        window_end_s: end,
        avg_kbps_in,
        avg_latency_ms,
        sample_count: samples.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fluctuation {
    Stable,
    Transient,
    Shifted,
}

/// True when `curr` is within `rel_threshold` of `prev`, relative to `prev`.
pub fn within_band(prev: f64, curr: f64, rel_threshold: f64) -> bool {
    (curr - prev).abs() <= rel_threshold * prev
}

/// Stateless comparison of two consecutive windows: `Stable` when the
/// inbound average stayed within the band, otherwise `Shifted`. The
/// transient/shifted split needs history; see [`FluctuationTracker`].
pub fn classify_fluctuation(
    prev: &WindowStats,
    curr: &WindowStats,
    rel_threshold: f64,
) -> Fluctuation {
    if within_band(prev.avg_kbps_in, curr.avg_kbps_in, rel_threshold) {
        Fluctuation::Stable
    } else {
        Fluctuation::Shifted
    }
}

/// Tracks the established data-rate level across windows.
///
/// A window outside the band around the established level is `Transient`
/// the first time. If the next window deviates in the same direction the
/// level has `Shifted` and the new window becomes the reference; if it
/// returns to the band the episode was a transient the buffer absorbed.
#[derive(Debug, Clone)]
pub struct FluctuationTracker {
    rel_threshold: f64,
    level: Option<f64>,
    /// Sign of the deviation seen in the previous window, if it deviated.
    pending: Option<f64>,
}

impl FluctuationTracker {
    pub fn new(rel_threshold: f64) -> Self {
        Self {
            rel_threshold,
            level: None,
            pending: None,
        }
    }

    pub fn rel_threshold(&self) -> f64 {
        self.rel_threshold
    }

    pub fn level(&self) -> Option<f64> {
        self.level
    }

    /// Classifies the next window. The first window always establishes the
    /// level and reports `Shifted`.
    pub fn classify(&mut self, stats: &WindowStats) -> Fluctuation {
        let curr = stats.avg_kbps_in;
        let Some(level) = self.level else {
            self.level = Some(curr);
            return Fluctuation::Shifted;
        };
        if within_band(level, curr, self.rel_threshold) {
            self.pending = None;
            return Fluctuation::Stable;
        }
        let direction = (curr - level).signum();
        if self.pending == Some(direction) {
            self.level = Some(curr);
            self.pending = None;
            Fluctuation::Shifted
        } else {
            self.pending = Some(direction);
            Fluctuation::Transient
        }
    }
}
