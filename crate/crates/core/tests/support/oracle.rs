//! Brute-force fixed-step playback model (1 ms steps).
//!
//! Written independently of the event-driven simulator: every step moves
//! bytes at the bandwidth in force at the step start, then drains the
//! buffer. Segment completion, stall and resume times are therefore
//! quantized to one step.

use abr_lab_core::model::{Decision, StreamConfig};
use abr_lab_core::sim::SimConfig;

pub const STEP_S: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub stall_count: usize,
    pub total_stall_s: f64,
    pub stall_starts: Vec<f64>,
    pub switch_count: usize,
    pub bytes_downloaded: u64,
    pub segments: usize,
    pub startup_s: Option<f64>,
}

struct State<'a> {
    decisions: &'a [Decision],
    next: usize,
    current: StreamConfig,
    decided_once: bool,
    switches: usize,
    buffer: f64,
    playing: bool,
    /// Bytes still missing from the in-flight segment; `None` while paused.
    in_flight: Option<(f64, u64)>,
    segment_s: f64,
}

fn target_seconds(c: &StreamConfig) -> f64 {
    c.buffer_target_bytes as f64 * 8.0 / 1000.0 / f64::from(c.resolution.nominal_bitrate_kbps)
}

impl State<'_> {
    fn boundary(&mut self, t: f64) {
        let mut latest = None;
        while self.next < self.decisions.len()
            && self.decisions[self.next].decided_at_s <= t + 1e-12
        {
            latest = Some(self.next);
            self.next += 1;
        }
        if let Some(i) = latest {
            let cfg = self.decisions[i].config.clone();
            if cfg.resolution.label != self.current.resolution.label {
                self.switches += 1;
            }
            self.current = cfg;
            self.decided_once = true;
        }
        if self.playing && self.buffer > target_seconds(&self.current) {
            self.in_flight = None;
        } else {
            let kbps = f64::from(self.current.resolution.nominal_bitrate_kbps);
            let bytes = (kbps * 1000.0 / 8.0 * self.segment_s).round() as u64;
            self.in_flight = Some((bytes as f64, bytes));
        }
    }
}

pub fn run(cfg: &SimConfig, decisions: &[Decision]) -> OracleOutcome {
    let steps = (cfg.session_duration_s / STEP_S).round() as usize;
    let mut st = State {
        decisions,
        next: 0,
        current: cfg.initial.clone(),
        decided_once: false,
        switches: 0,
        buffer: 0.0,
        playing: false,
        in_flight: None,
        segment_s: cfg.segment_duration_s,
    };
    let mut bytes_downloaded = 0u64;
    let mut segments = 0;
    let mut startup_s = None;
    let mut stall_open: Option<f64> = None;
    let mut stalls: Vec<(f64, f64)> = Vec::new();

    st.boundary(0.0);
    for k in 0..steps {
        let t = k as f64 * STEP_S;
        let t_end = t + STEP_S;
        if st.in_flight.is_none() && st.playing && st.buffer <= target_seconds(&st.current) {
            st.boundary(t);
        }

        let points = cfg.trace.points();
        let idx = points.iter().rposition(|p| p.t_s <= t + 1e-9).unwrap_or(0);
        let mut budget = points[idx].bandwidth_kbps * 1000.0 / 8.0 * STEP_S;
        while let Some((missing, size)) = st.in_flight {
            if missing > budget {
                st.in_flight = Some((missing - budget, size));
                break;
            }
            budget -= missing;
            bytes_downloaded += size;
            segments += 1;
            st.buffer += st.segment_s;
            let resume_at = if st.decided_once {
                target_seconds(&st.current)
            } else {
                cfg.startup_threshold_s
            };
            if !st.playing && st.buffer >= resume_at {
                st.playing = true;
                match stall_open.take() {
                    Some(s) => stalls.push((s, t_end)),
                    None => startup_s = Some(t_end),
                }
            }
            st.boundary(t_end);
        }

        if st.playing {
            if st.buffer <= STEP_S {
                let hit = t + st.buffer;
                st.buffer = 0.0;
                st.playing = false;
                stall_open = Some(hit);
            } else {
                st.buffer -= STEP_S;
            }
        }
    }
    if let Some(s) = stall_open {
        stalls.push((s, cfg.session_duration_s));
    }
    OracleOutcome {
        stall_count: stalls.len(),
        total_stall_s: stalls.iter().map(|(a, b)| b - a).sum(),
        stall_starts: stalls.iter().map(|s| s.0).collect(),
        switch_count: st.switches,
        bytes_downloaded,
        segments,
        startup_s,
    }
}
