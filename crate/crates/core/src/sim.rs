//! Event-driven playback simulation under a network trace.
//!
//! Segments of `segment_duration_s` media are fetched one at a time at the
//! current rung's nominal bitrate over the trace's piecewise-constant
//! bandwidth. Each completed segment adds its duration to the buffer;
//! playback drains one media second per second. Rules:
//!
//! * Decisions take effect at the next fetch boundary (the start of a
//!   segment fetch) at or after their `decided_at_s`. If several are
//!   pending, the latest wins and the others are logged as superseded.
//! * At a fetch boundary, while playing, fetching pauses if the buffer is
//!   above the current target and resumes once it drains back to it.
//! * Playback stalls when the buffer empties and resumes when it reaches
//!   the resume threshold: `startup_threshold_s` until the first decision
//!   is applied, the current buffer target (in seconds) afterwards.
//! * A switch never discards buffered media and an in-flight segment
//!   finishes at the rung it was started with.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decision, StreamConfig, Trace, WindowStats, KILOBITS_PER_BYTE};

/// Buffer levels this close to empty count as empty.
const BUFFER_EPS_S: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("trace covers {trace_s} s but the session needs {session_s} s")]
    TraceTooShort { trace_s: f64, session_s: f64 },
    #[error("decision {index} at t = {t_s} s is out of order or outside the session")]
    InvalidDecisionOrder { index: usize, t_s: f64 },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub segment_duration_s: f64,
    pub startup_threshold_s: f64,
    pub trace: Trace,
    pub session_duration_s: f64,
    /// Configuration in force before any decision is applied.
    pub initial: StreamConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.segment_duration_s) {
            return Err(SimError::InvalidConfig("segment duration must be positive"));
        }
        if !positive(self.startup_threshold_s) {
            return Err(SimError::InvalidConfig(
                "startup threshold must be positive",
            ));
        }
        if !positive(self.session_duration_s) {
            return Err(SimError::InvalidConfig("session duration must be positive"));
        }
        if self.initial.buffer_target_bytes == 0 {
            return Err(SimError::InvalidConfig(
                "initial buffer target must be positive",
            ));
        }
        if self.session_duration_s > self.trace.duration_s() {
            return Err(SimError::TraceTooShort {
                trace_s: self.trace.duration_s(),
                session_s: self.session_duration_s,
            });
        }
        Ok(())
    }
}

/// Bytes in one segment at `kbps` nominal bitrate.
pub fn segment_bytes(kbps: u32, segment_duration_s: f64) -> u64 {
    (f64::from(kbps) * segment_duration_s / KILOBITS_PER_BYTE).round() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stall {
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Switch {
    pub t_s: f64,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum SimEventKind {
    PlaybackStart,
    StallStart,
    StallEnd,
    SegmentComplete {
        resolution: String,
        bitrate_kbps: u32,
        bytes: u64,
    },
    DecisionApplied {
        index: usize,
    },
    DecisionSuperseded {
        index: usize,
    },
    Switch {
        from: String,
        to: String,
    },
    FetchPause,
    FetchResume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t_s: f64,
    /// Buffer level right after the event.
    pub buffer_s: f64,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

/// Observable player state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaybackState {
    pub buffer_s: f64,
    pub playing: bool,
    pub stall_events: Vec<Stall>,
    pub switches: Vec<Switch>,
    pub bytes_downloaded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_duration_s: f64,
    pub stall_count: usize,
    pub total_stall_s: f64,
    pub rebuffer_ratio: f64,
    pub switch_count: usize,
    pub time_weighted_avg_height: f64,
    pub startup_s: f64,
    pub playing_s: f64,
    pub bytes_downloaded: u64,
    pub segments_completed: usize,
    pub final_buffer_s: f64,
    pub stalls: Vec<Stall>,
    pub switches: Vec<Switch>,
    /// Every decision handed to the player, in arrival order.
    pub decisions: Vec<Decision>,
    pub events: Vec<SimEvent>,
    /// Window averages behind the decisions; filled in by the session.
    #[serde(default)]
    pub windows: Vec<WindowStats>,
}

impl SessionReport {
    /// Indices of decisions that actually took effect, in order.
    pub fn applied_decisions(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                SimEventKind::DecisionApplied { index } => Some(index),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeWeights {
    pub quality: f64,
    pub rebuffer: f64,
    pub switches: f64,
}

impl Default for QoeWeights {
    fn default() -> Self {
        Self {
            quality: 1.0,
            rebuffer: 4.0,
            switches: 1.0,
        }
    }
}

/// Composite score: quality relative to 1080 lines, minus weighted
/// rebuffer ratio, minus weighted switches per decision.
pub fn compute_qoe(report: &SessionReport, w: &QoeWeights) -> f64 {
    let switch_rate = if report.decisions.is_empty() {
        0.0
    } else {
        report.switch_count as f64 / report.decisions.len() as f64
    };
    w.quality * report.time_weighted_avg_height / 1080.0
        - w.rebuffer * report.rebuffer_ratio
        - w.switches * switch_rate
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Fetch {
    Downloading {
        remaining_bytes: f64,
        bytes: u64,
        kbps: u32,
        height: u32,
    },
    Idle,
}

/// Incremental simulator. Feed decisions in order with
/// [`Simulator::push_decision`], move time forward with
/// [`Simulator::advance_until`], and close with [`Simulator::finish`].
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    t: f64,
    current: StreamConfig,
    any_applied: bool,
    fetch: Fetch,
    paused: bool,
    /// Buffered media, front plays first: (height, media seconds).
    queue: VecDeque<(u32, f64)>,
    state: PlaybackState,
    started_at: Option<f64>,
    stall_started: Option<f64>,
    played_height_s: f64,
    decisions: Vec<Decision>,
    next_pending: usize,
    events: Vec<SimEvent>,
    segments_completed: usize,
    /// The t = 0 fetch boundary runs lazily so decisions pushed before the
    /// first advance can apply there.
    begun: bool,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(Self {
            current: cfg.initial.clone(),
            cfg,
            t: 0.0,
            any_applied: false,
            fetch: Fetch::Idle,
            paused: false,
            queue: VecDeque::new(),
            state: PlaybackState {
                buffer_s: 0.0,
                playing: false,
                stall_events: Vec::new(),
                switches: Vec::new(),
                bytes_downloaded: 0,
            },
            started_at: None,
            stall_started: None,
            played_height_s: 0.0,
            decisions: Vec::new(),
            next_pending: 0,
            events: Vec::new(),
            segments_completed: 0,
            begun: false,
        })
    }

    pub fn state(&self) -> &PlaybackState {
        &self.state
    }

    pub fn now(&self) -> f64 {
        self.t
    }

    pub fn current(&self) -> &StreamConfig {
        &self.current
    }

    pub fn push_decision(&mut self, d: Decision) -> Result<(), SimError> {
        let index = self.decisions.len();
        let last = self.decisions.last().map_or(0.0, |p| p.decided_at_s);
        let t = d.decided_at_s;
        if !(t.is_finite() && t >= last && t <= self.cfg.session_duration_s) {
            return Err(SimError::InvalidDecisionOrder { index, t_s: t });
        }
        self.decisions.push(d);
        Ok(())
    }

    fn target_s(&self) -> f64 {
        self.current.buffer_target_s()
    }

    fn resume_threshold_s(&self) -> f64 {
        if self.any_applied {
            self.target_s()
        } else {
            self.cfg.startup_threshold_s
        }
    }

    fn bandwidth_bytes_per_s(&self) -> f64 {
        self.cfg.trace.point_at(self.t).bandwidth_kbps / KILOBITS_PER_BYTE
    }

    fn log(&mut self, kind: SimEventKind) {
        self.events.push(SimEvent {
            t_s: self.t,
            buffer_s: self.state.buffer_s,
            kind,
        });
    }

    /// Applies due decisions, then either pauses or starts the next segment.
    fn start_fetch(&mut self) {
        let due_end = self.next_pending
            + self.decisions[self.next_pending..]
                .iter()
                .take_while(|d| d.decided_at_s <= self.t)
                .count();
        if due_end > self.next_pending {
            for index in self.next_pending..due_end - 1 {
                self.log(SimEventKind::DecisionSuperseded { index });
            }
            let index = due_end - 1;
            let next = self.decisions[index].config.clone();
            self.log(SimEventKind::DecisionApplied { index });
            if next.resolution != self.current.resolution {
                let sw = Switch {
                    t_s: self.t,
                    from: self.current.resolution.label.clone(),
                    to: next.resolution.label.clone(),
                };
                self.log(SimEventKind::Switch {
                    from: sw.from.clone(),
                    to: sw.to.clone(),
                });
                self.state.switches.push(sw);
            }
            self.current = next;
            self.any_applied = true;
            self.next_pending = due_end;
        }

        if self.state.playing && self.state.buffer_s > self.target_s() {
            if !self.paused {
                self.paused = true;
                self.log(SimEventKind::FetchPause);
            }
            self.fetch = Fetch::Idle;
            return;
        }
        if self.paused {
            self.paused = false;
            self.log(SimEventKind::FetchResume);
        }
        let r = &self.current.resolution;
        let bytes = segment_bytes(r.nominal_bitrate_kbps, self.cfg.segment_duration_s);
        self.fetch = Fetch::Downloading {
            remaining_bytes: bytes as f64,
            bytes,
            kbps: r.nominal_bitrate_kbps,
            height: r.height,
        };
    }

    /// Moves the clock by `dt` with no event inside the interval.
    fn elapse(&mut self, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        if let Fetch::Downloading {
            remaining_bytes, ..
        } = &mut self.fetch
        {
            let bw = self.cfg.trace.point_at(self.t).bandwidth_kbps / KILOBITS_PER_BYTE;
            *remaining_bytes -= bw * dt;
        }
        if self.state.playing {
            let mut left = dt;
            while left > 0.0 {
                let Some(front) = self.queue.front_mut() else {
                    break;
                };
                let take = front.1.min(left);
                front.1 -= take;
                left -= take;
                self.played_height_s += f64::from(front.0) * take;
                if front.1 <= 0.0 {
                    self.queue.pop_front();
                }
            }
            self.state.buffer_s = (self.state.buffer_s - dt).max(0.0);
        }
        self.t += dt;
    }

    /// Times of the next segment completion, stall and fetch resume.
    fn next_times(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let completion = match self.fetch {
            Fetch::Downloading {
                remaining_bytes, ..
            } => {
                let bw = self.bandwidth_bytes_per_s();
                (bw > 0.0).then(|| self.t + remaining_bytes.max(0.0) / bw)
            }
            Fetch::Idle => None,
        };
        let stall = self.state.playing.then_some(self.t + self.state.buffer_s);
        let resume = (self.state.playing && self.fetch == Fetch::Idle)
            .then(|| self.t + (self.state.buffer_s - self.target_s()).max(0.0));
        (completion, stall, resume)
    }

    /// Processes every event strictly before `limit`.
    pub fn advance_until(&mut self, limit: f64) {
        let limit = limit.min(self.cfg.session_duration_s);
        if !self.begun {
            if limit <= 0.0 {
                return;
            }
            self.begun = true;
            self.start_fetch();
        }
        loop {
            let (completion, stall, resume) = self.next_times();
            let change = self.cfg.trace.next_change_after(self.t);
            let next = [completion, stall, resume, change]
                .into_iter()
                .flatten()
                .fold(f64::INFINITY, f64::min);
            if !(next < limit) {
                break;
            }
            self.elapse(next - self.t);
            self.t = next;

            if completion == Some(next) {
                self.complete_segment();
            }
            if stall == Some(next) && self.state.playing && self.state.buffer_s <= BUFFER_EPS_S {
                self.begin_stall();
            }
            if resume == Some(next) && self.state.playing && self.fetch == Fetch::Idle {
                // absorb rounding so the boundary sees the buffer at the target
                self.state.buffer_s = self.state.buffer_s.min(self.target_s());
                self.start_fetch();
            }
        }
    }

    fn complete_segment(&mut self) {
        let Fetch::Downloading {
            bytes,
            kbps,
            height,
            ..
        } = self.fetch
        else {
            return;
        };
        self.state.buffer_s += self.cfg.segment_duration_s;
        self.queue.push_back((height, self.cfg.segment_duration_s));
        self.state.bytes_downloaded += bytes;
        self.segments_completed += 1;
        let label = self.resolution_label_for(height);
        self.log(SimEventKind::SegmentComplete {
            resolution: label,
            bitrate_kbps: kbps,
            bytes,
        });
        if !self.state.playing && self.state.buffer_s >= self.resume_threshold_s() {
            self.state.playing = true;
            match self.stall_started.take() {
                Some(start_s) => {
                    self.state.stall_events.push(Stall {
                        start_s,
                        end_s: self.t,
                    });
                    self.log(SimEventKind::StallEnd);
                }
                None => {
                    self.started_at = Some(self.t);
                    self.log(SimEventKind::PlaybackStart);
                }
            }
        }
        self.fetch = Fetch::Idle;
        self.start_fetch();
    }

    fn resolution_label_for(&self, height: u32) -> String {
        if self.current.resolution.height == height {
            return self.current.resolution.label.clone();
        }
        self.decisions
            .iter()
            .map(|d| &d.config.resolution)
            .chain(std::iter::once(&self.cfg.initial.resolution))
            .find(|r| r.height == height)
            .map_or_else(|| format!("{height}p"), |r| r.label.clone())
    }

    fn begin_stall(&mut self) {
        self.state.buffer_s = 0.0;
        self.queue.clear();
        self.state.playing = false;
        self.stall_started = Some(self.t);
        self.log(SimEventKind::StallStart);
    }

    /// Runs to the end of the session and builds the report.
    pub fn finish(mut self) -> SessionReport {
        let end = self.cfg.session_duration_s;
        self.advance_until(end);
        self.elapse(end - self.t);
        self.t = end;
        if let Some(start_s) = self.stall_started.take() {
            self.state.stall_events.push(Stall {
                start_s,
                end_s: end,
            });
        }
        let total_stall_s: f64 = self
            .state
            .stall_events
            .iter()
            .map(|s| s.end_s - s.start_s)
            .fold(0.0, |acc, d| acc + d);
        let startup_s = self.started_at.unwrap_or(end);
        let playing_s = (end - startup_s - total_stall_s).max(0.0);
        let time_weighted_avg_height = if playing_s > 0.0 {
            self.played_height_s / playing_s
        } else {
            0.0
        };
        SessionReport {
            session_duration_s: end,
            stall_count: self.state.stall_events.len(),
            total_stall_s,
            rebuffer_ratio: total_stall_s / end,
            switch_count: self.state.switches.len(),
            time_weighted_avg_height,
            startup_s,
            playing_s,
            bytes_downloaded: self.state.bytes_downloaded,
            segments_completed: self.segments_completed,
            final_buffer_s: self.state.buffer_s,
            stalls: self.state.stall_events,
            switches: self.state.switches,
            decisions: self.decisions,
            events: self.events,
            windows: Vec::new(),
        }
    }
}

/// Runs a whole session against a fully known decision stream.
pub fn simulate(
    cfg: SimConfig,
    decisions: impl IntoIterator<Item = Decision>,
) -> Result<SessionReport, SimError> {
    let mut sim = Simulator::new(cfg)?;
    for d in decisions {
        sim.push_decision(d)?;
    }
    Ok(sim.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BitrateLadder, DecisionSource, Reason, TracePoint};

    fn config_1080p(buffer_s: f64) -> StreamConfig {
        let r = BitrateLadder::default().get("1080p").unwrap().clone();
        StreamConfig {
            buffer_target_bytes: r.bytes_for_seconds(buffer_s),
            resolution: r,
        }
    }

    fn report(report_fields: (f64, f64, usize, usize)) -> SessionReport {
        let (height, rebuffer, switches, decisions) = report_fields;
        let d = Decision {
            config: config_1080p(2.0),
            source: DecisionSource::RuleBased,
            reason: Reason::LatencyOk,
            decided_at_s: 0.0,
        };
        SessionReport {
            session_duration_s: 60.0,
            stall_count: 0,
            total_stall_s: rebuffer * 60.0,
            rebuffer_ratio: rebuffer,
            switch_count: switches,
            time_weighted_avg_height: height,
            startup_s: 0.0,
            playing_s: 60.0,
            bytes_downloaded: 0,
            segments_completed: 0,
            final_buffer_s: 0.0,
            stalls: vec![],
            switches: vec![],
            decisions: vec![d; decisions],
            events: vec![],
            windows: vec![],
        }
    }

    #[test]
    fn qoe_examples() {
        let w = QoeWeights::default();
        assert_eq!(compute_qoe(&report((1080.0, 0.0, 0, 10)), &w), 1.0);
        assert_eq!(compute_qoe(&report((1080.0, 0.25, 0, 10)), &w), 0.0);
        assert_eq!(compute_qoe(&report((540.0, 0.0, 0, 10)), &w), 0.5);
        assert_eq!(compute_qoe(&report((1080.0, 0.0, 0, 0)), &w), 1.0);
        assert_eq!(compute_qoe(&report((1080.0, 0.0, 2, 4)), &w), 0.5);
    }

    #[test]
    fn rejects_short_trace_and_bad_order() {
        let trace = Trace::constant(1000.0, 20.0, 30.0).unwrap();
        let cfg = SimConfig {
            segment_duration_s: 1.0,
            startup_threshold_s: 2.0,
            trace,
            session_duration_s: 60.0,
            initial: config_1080p(2.0),
        };
        assert!(matches!(
            Simulator::new(cfg.clone()),
            Err(SimError::TraceTooShort { .. })
        ));
        let cfg = SimConfig {
            session_duration_s: 30.0,
            ..cfg
        };
        let d = |t| Decision {
            config: config_1080p(2.0),
            source: DecisionSource::RuleBased,
            reason: Reason::LatencyOk,
            decided_at_s: t,
        };
        assert!(matches!(
            simulate(cfg.clone(), [d(5.0), d(4.0)]),
            Err(SimError::InvalidDecisionOrder { index: 1, .. })
        ));
        assert!(matches!(
            simulate(cfg, [d(31.0)]),
            Err(SimError::InvalidDecisionOrder { index: 0, .. })
        ));
    }

    #[test]
    fn stalls_when_bandwidth_vanishes() {
        let trace = Trace::new(
            vec![
                TracePoint {
                    t_s: 0.0,
                    bandwidth_kbps: 1000.0,
                    latency_ms: 20.0,
                },
                TracePoint {
                    t_s: 10.0,
                    bandwidth_kbps: 0.0,
                    latency_ms: 20.0,
                },
            ],
            30.0,
        )
        .unwrap();
        let cfg = SimConfig {
            segment_duration_s: 1.0,
            startup_threshold_s: 3.0,
            trace,
            session_duration_s: 30.0,
            initial: config_1080p(3.0),
        };
        let r = simulate(cfg, []).unwrap();
        assert_eq!(
            r.stalls,
            vec![Stall {
                start_s: 13.0,
                end_s: 30.0
            }]
        );
        assert_eq!(r.total_stall_s, 17.0);
        assert_eq!(r.switch_count, 0);
        assert_eq!(r.startup_s, 3.0);
        assert_eq!(r.playing_s, 10.0);
    }
}
