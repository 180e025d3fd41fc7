//! Shared value types: the bitrate ladder, network samples, window
//! statistics, stream configurations, decisions and network traces.
//!
//! Bandwidth is always kilobits per second. Byte counts convert to
//! kilobits with a factor of 8/1000.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bytes to kilobits.
pub const KILOBITS_PER_BYTE: f64 = 8.0 / 1000.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("ladder must contain at least one rung")]
    EmptyLadder,
    #[error("lowest rung threshold must be 0, got {0}")]
    LowestThresholdNotZero(f64),
    #[error("rung {index} ({label}): {what}")]
    InvalidRung {
        index: usize,
        label: String,
        what: &'static str,
    },
    #[error("trace must contain at least one point")]
    EmptyTrace,
    #[error("trace point {index}: {what}")]
    InvalidTracePoint { index: usize, what: &'static str },
    #[error("trace duration {duration_s} must exceed the last point time {last_t_s}")]
    InvalidTraceDuration { duration_s: f64, last_t_s: f64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One encoded rendition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub label: String,
    pub height: u32,
    pub nominal_bitrate_kbps: u32,
}

impl Resolution {
    pub fn new(label: impl Into<String>, height: u32, nominal_bitrate_kbps: u32) -> Self {
        Self {
            label: label.into(),
            height,
            nominal_bitrate_kbps,
        }
    }

    /// Bytes needed to hold `seconds` of media at this rung's nominal bitrate.
    pub fn bytes_for_seconds(&self, seconds: f64) -> u64 {
        (seconds * f64::from(self.nominal_bitrate_kbps) / KILOBITS_PER_BYTE).round() as u64
    }

    /// Media seconds represented by `bytes` at this rung's nominal bitrate.
    pub fn seconds_for_bytes(&self, bytes: u64) -> f64 {
        bytes as f64 * KILOBITS_PER_BYTE / f64::from(self.nominal_bitrate_kbps)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

/// A ladder rung together with the minimum average data rate that selects it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub resolution: Resolution,
    pub selection_threshold_kbps: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct LadderRow {
    label: String,
    height: u32,
    nominal_bitrate_kbps: u32,
    selection_threshold_kbps: f64,
}

/// Ordered set of renditions, lowest first.
///
/// Construction validates that heights and bitrates strictly increase,
/// thresholds never decrease, the lowest threshold is exactly zero and
/// every upper rung is sustainable at its own threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BitrateLadder {
    rungs: Vec<Rung>,
}

impl BitrateLadder {
    pub fn new(rungs: Vec<Rung>) -> Result<Self, ModelError> {
        let first = rungs.first().ok_or(ModelError::EmptyLadder)?;
        if first.selection_threshold_kbps != 0.0 {
            return Err(ModelError::LowestThresholdNotZero(
                first.selection_threshold_kbps,
            ));
        }
        for (index, rung) in rungs.iter().enumerate() {
            let bad = |what| ModelError::InvalidRung {
                index,
                label: rung.resolution.label.clone(),
                what,
            };
            if rung.resolution.height == 0 {
                return Err(bad("height must be positive"));
            }
            if rung.resolution.nominal_bitrate_kbps == 0 {
                return Err(bad("nominal bitrate must be positive"));
            }
            if !rung.selection_threshold_kbps.is_finite() {
                return Err(bad("threshold must be finite"));
            }
            if index > 0 {
                let prev = &rungs[index - 1];
                if rung.resolution.height <= prev.resolution.height {
                    return Err(bad("height must strictly increase"));
                }
                if rung.resolution.nominal_bitrate_kbps <= prev.resolution.nominal_bitrate_kbps {
                    return Err(bad("nominal bitrate must strictly increase"));
                }
                if rung.selection_threshold_kbps < prev.selection_threshold_kbps {
                    return Err(bad("threshold must not decrease"));
                }
                if f64::from(rung.resolution.nominal_bitrate_kbps) > rung.selection_threshold_kbps {
                    return Err(bad("nominal bitrate exceeds selection threshold"));
                }
            }
        }
        Ok(Self { rungs })
    }

    pub fn rungs(&self) -> &[Rung] {
        &self.rungs
    }

    pub fn len(&self) -> usize {
        self.rungs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rungs.is_empty()
    }

    pub fn lowest(&self) -> &Resolution {
        &self.rungs[0].resolution
    }

    pub fn highest(&self) -> &Resolution {
        &self.rungs[self.rungs.len() - 1].resolution
    }

    /// Index of the highest rung whose threshold is at or below `avg_kbps`.
    pub fn lookup_index(&self, avg_kbps: f64) -> usize {
        // thresholds are sorted and the first one is 0, so the partition point is >= 1
        let above = self
            .rungs
            .partition_point(|r| r.selection_threshold_kbps <= avg_kbps);
        above.saturating_sub(1)
    }

    /// Highest sustainable rung for an average data rate.
    pub fn lookup(&self, avg_kbps: f64) -> &Resolution {
        &self.rungs[self.lookup_index(avg_kbps)].resolution
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.rungs.iter().position(|r| r.resolution.label == label)
    }

    pub fn get(&self, label: &str) -> Option<&Resolution> {
        self.index_of(label).map(|i| &self.rungs[i].resolution)
    }

    pub fn contains(&self, resolution: &Resolution) -> bool {
        self.rungs.iter().any(|r| &r.resolution == resolution)
    }

    pub fn labels(&self) -> Vec<String> {
        self.rungs
            .iter()
            .map(|r| r.resolution.label.clone())
            .collect()
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rungs = Vec::new();
        for row in rdr.deserialize() {
            let row: LadderRow = row?;
            rungs.push(Rung {
                resolution: Resolution::new(row.label, row.height, row.nominal_bitrate_kbps),
                selection_threshold_kbps: row.selection_threshold_kbps,
            });
        }
        Self::new(rungs)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for r in &self.rungs {
            wtr.serialize(LadderRow {
                label: r.resolution.label.clone(),
                height: r.resolution.height,
                nominal_bitrate_kbps: r.resolution.nominal_bitrate_kbps,
                selection_threshold_kbps: r.selection_threshold_kbps,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl Default for BitrateLadder {
    /// 240p through 2160p. The only anchored boundary is 1000 Kbps selecting
    /// 1080p; everything else is a tunable default.
    fn default() -> Self {
        let table = [
            ("240p", 240, 200, 0.0),
            ("360p", 360, 300, 300.0),
            ("480p", 480, 450, 500.0),
            ("720p", 720, 700, 800.0),
            ("1080p", 1080, 1000, 1000.0),
            ("2160p", 2160, 5000, 6000.0),
        ];
        let rungs = table
            .iter()
            .map(|&(label, height, kbps, threshold)| Rung {
                resolution: Resolution::new(label, height, kbps),
                selection_threshold_kbps: threshold,
            })
            .collect();
        Self::new(rungs).expect("default ladder is valid")
    }
}

impl<'de> Deserialize<'de> for BitrateLadder {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rungs: Vec<Rung>,
        }
        let raw = Raw::deserialize(de)?;
        Self::new(raw.rungs).map_err(serde::de::Error::custom)
    }
}

/// One probe observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSample {
    pub timestamp_s: f64,
    pub kbps_in: f64,
    pub kbps_out: f64,
    /// `None` when the round-trip probe failed.
    pub latency_ms: Option<f64>,
}

/// Averages over one observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub avg_kbps_in: f64,
    /// Mean over samples that carried a latency; `None` if none did.
    pub avg_latency_ms: Option<f64>,
    pub sample_count: usize,
}

/// What the player should be doing: which rung, and how much to pre-load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub resolution: Resolution,
    pub buffer_target_bytes: u64,
}

impl StreamConfig {
    pub fn buffer_target_s(&self) -> f64 {
        self.resolution.seconds_for_bytes(self.buffer_target_bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionSource {
    RuleBased,
    Advisor,
    AdvisorFallback,
    UserOverride,
}

impl DecisionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::RuleBased => "rule-based",
            Self::Advisor => "advisor",
            Self::AdvisorFallback => "advisor-fallback",
            Self::UserOverride => "user-override",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::RuleBased,
            Self::Advisor,
            Self::AdvisorFallback,
            Self::UserOverride,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
    }
}

impl fmt::Display for DecisionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Machine-readable reason attached to a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    /// Latency at or below threshold: base buffer.
    LatencyOk,
    /// Latency above threshold: buffer grown.
    LatencyHigh,
    /// No latency measured in the window: base buffer.
    LatencyAbsent,
    HysteresisHold,
    AdvisorOk,
    AdvisorTimeout,
    AdvisorTransport,
    InvalidResponse,
    UserOverride,
    /// Rung pinned by an earlier user override.
    OverridePinned,
    /// Fixed-rung baseline.
    Fixed,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LatencyOk => "latency-ok",
            Self::LatencyHigh => "latency-high",
            Self::LatencyAbsent => "latency-absent",
            Self::HysteresisHold => "hysteresis-hold",
            Self::AdvisorOk => "advisor-ok",
            Self::AdvisorTimeout => "advisor-timeout",
            Self::AdvisorTransport => "advisor-transport",
            Self::InvalidResponse => "invalid-response",
            Self::UserOverride => "user-override",
            Self::OverridePinned => "override-pinned",
            Self::Fixed => "fixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        use Reason::*;
        [
            LatencyOk,
            LatencyHigh,
            LatencyAbsent,
            HysteresisHold,
            AdvisorOk,
            AdvisorTimeout,
            AdvisorTransport,
            InvalidResponse,
            UserOverride,
            OverridePinned,
            Fixed,
        ]
        .into_iter()
        .find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub config: StreamConfig,
    pub source: DecisionSource,
    pub reason: Reason,
    pub decided_at_s: f64,
}

/// Available downlink and path RTT from `t_s` until the next point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t_s: f64,
    pub bandwidth_kbps: f64,
    pub latency_ms: f64,
}

/// Piecewise-constant network conditions over `[0, duration_s]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    points: Vec<TracePoint>,
    duration_s: f64,
}

impl Trace {
    pub fn new(points: Vec<TracePoint>, duration_s: f64) -> Result<Self, ModelError> {
        let first = points.first().ok_or(ModelError::EmptyTrace)?;
        if first.t_s != 0.0 {
            return Err(ModelError::InvalidTracePoint {
                index: 0,
                what: "first point must be at t = 0",
            });
        }
        for (index, p) in points.iter().enumerate() {
            let bad = |what| ModelError::InvalidTracePoint { index, what };
            if !(p.bandwidth_kbps.is_finite() && p.bandwidth_kbps >= 0.0) {
                return Err(bad("bandwidth must be finite and non-negative"));
            }
            if !(p.latency_ms.is_finite() && p.latency_ms > 0.0) {
                return Err(bad("latency must be finite and positive"));
            }
            if index > 0 && p.t_s <= points[index - 1].t_s {
                return Err(bad("timestamps must strictly increase"));
            }
        }
        let last_t_s = points[points.len() - 1].t_s;
        if !(duration_s.is_finite() && duration_s > last_t_s) {
            return Err(ModelError::InvalidTraceDuration {
                duration_s,
                last_t_s,
            });
        }
        Ok(Self { points, duration_s })
    }

    /// A single-segment trace.
    pub fn constant(
        bandwidth_kbps: f64,
        latency_ms: f64,
        duration_s: f64,
    ) -> Result<Self, ModelError> {
        Self::new(
            vec![TracePoint {
                t_s: 0.0,
                bandwidth_kbps,
                latency_ms,
            }],
            duration_s,
        )
    }

    /// Builds a trace whose last point lasts as long as the gap before it
    /// (one second for a single-point trace).
    pub fn from_points(points: Vec<TracePoint>) -> Result<Self, ModelError> {
        let n = points.len();
        let duration_s = match n {
            0 => return Err(ModelError::EmptyTrace),
            1 => points[0].t_s + 1.0,
            _ => 2.0 * points[n - 1].t_s - points[n - 2].t_s,
        };
        Self::new(points, duration_s)
    }

    pub fn points(&self) -> &[TracePoint] {
        &self.points
    }

    pub fn duration_s(&self) -> f64 {
        self.duration_s
    }

    /// Index of the point in effect at `t_s` (a boundary belongs to the later point).
    pub fn index_at(&self, t_s: f64) -> usize {
        self.points
            .partition_point(|p| p.t_s <= t_s)
            .saturating_sub(1)
    }

    pub fn point_at(&self, t_s: f64) -> &TracePoint {
        &self.points[self.index_at(t_s)]
    }

    /// First change point strictly after `t_s`, if any.
    pub fn next_change_after(&self, t_s: f64) -> Option<f64> {
        let i = self.points.partition_point(|p| p.t_s <= t_s);
        self.points.get(i).map(|p| p.t_s)
    }

    /// Reads `t_s,bandwidth_kbps,latency_ms` rows. See [`Trace::from_points`]
    /// for how the duration is derived.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let points = rdr.deserialize().collect::<Result<Vec<TracePoint>, _>>()?;
        Self::from_points(points)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for p in &self.points {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Trace {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            points: Vec<TracePoint>,
            duration_s: f64,
        }
        let raw = Raw::deserialize(de)?;
        Self::new(raw.points, raw.duration_s).map_err(serde::de::Error::custom)
    }
}
