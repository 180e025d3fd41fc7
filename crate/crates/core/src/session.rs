//! Runs the monitor/decide activity and the playback activity side by
//! side.
//!
//! Activity A turns samples into window statistics and decisions; activity
//! B is the playback simulator. Decisions travel A → B over one ordered,
//! unbounded channel, so B sees exactly the sequence A emitted. In trace
//! mode both run in simulated time: B only advances its clock up to the
//! timestamp of the next decision it has received.

use std::collections::VecDeque;
use std::io::Write;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{AdvisorPolicy, AdvisorTransport, HttpAdvisor};
use crate::aggregator::{Aggregator, AggregatorError, Fluctuation, FluctuationTracker};
use crate::model::{
    Decision, DecisionSource, ModelError, NetworkSample, Reason, Resolution, StreamConfig, Trace,
    TracePoint, WindowStats,
};
use crate::policy::{
    rebase_buffer, Decide, FixedPolicy, Hysteresis, PolicyError, RulePolicy, RulePolicyConfig,
};
use crate::probe::{
    trace_samples, CounterSource, LiveProbe, ProbeConfig, ProbeError, RoundTripSource,
};
use crate::sim::{SessionReport, SimConfig, SimError, Simulator};
use crate::telemetry::{DecisionLog, SampleLog, TelemetryError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("advisor policy needs an advisor URL or transport")]
    MissingAdvisor,
    #[error("no samples were collected")]
    NoSamples,
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("{0} activity panicked")]
    ActivityPanicked(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    Rule,
    Advisor,
    /// Rule policy deciding on every sample with no fluctuation filter.
    NoAveraging,
    /// Rule policy with the latency-driven buffer growth disabled.
    NoGrowth,
    /// Always the named rung.
    Fixed(String),
}

impl PolicyKind {
    pub fn name(&self) -> String {
        match self {
            Self::Rule => "rule".into(),
            Self::Advisor => "advisor".into(),
            Self::NoAveraging => "no-averaging".into(),
            Self::NoGrowth => "no-growth".into(),
            Self::Fixed(label) => format!("fixed:{label}"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(Self::Rule),
            "advisor" => Ok(Self::Advisor),
            "no-averaging" => Ok(Self::NoAveraging),
            "no-growth" => Ok(Self::NoGrowth),
            other => match other.strip_prefix("fixed:") {
                Some(label) if !label.is_empty() => Ok(Self::Fixed(label.to_string())),
                _ => Err(format!(
                    "unknown policy {other:?} (expected rule, advisor, no-averaging, no-growth or fixed:<rung>)"
                )),
            },
        }
    }
}

/// User picks a rung at `t_s`; it stays pinned until the next override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOverride {
    pub t_s: f64,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub policy: PolicyKind,
    pub rule: RulePolicyConfig,
    pub window_s: f64,
    pub fluct_threshold: f64,
    pub probe: ProbeConfig,
    pub session_duration_s: f64,
    pub segment_duration_s: f64,
    /// Defaults to the rule policy's base buffer.
    pub startup_threshold_s: Option<f64>,
    pub advisor_url: Option<String>,
    pub advisor_timeout_ms: u64,
    pub overrides: Vec<UserOverride>,
}

impl SessionConfig {
    pub fn new(session_duration_s: f64) -> Self {
        Self {
            policy: PolicyKind::Rule,
            rule: RulePolicyConfig::default(),
            window_s: 3.0,
            fluct_threshold: 0.15,
            probe: ProbeConfig::default(),
            session_duration_s,
            segment_duration_s: 1.0,
            startup_threshold_s: None,
            advisor_url: None,
            advisor_timeout_ms: 1000,
            overrides: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), SessionError> {
        self.rule.validate()?;
        let bad = |m: &str| Err(SessionError::InvalidConfig(m.to_string()));
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return bad("window must be positive");
        }
        if !(self.fluct_threshold > 0.0 && self.fluct_threshold < 1.0) {
            return bad("fluctuation threshold must be in (0, 1)");
        }
        if !(self.probe.interval_s.is_finite() && self.probe.interval_s > 0.0)
            || self.probe.latency_timeout_ms == 0
        {
            return bad("probe interval and latency timeout must be positive");
        }
        if !(self.session_duration_s.is_finite() && self.session_duration_s > 0.0) {
            return bad("session duration must be positive");
        }
        for o in &self.overrides {
            if self.rule.ladder.get(&o.label).is_none() {
                return Err(PolicyError::UnknownRung(o.label.clone()).into());
            }
        }
        if self.overrides.windows(2).any(|w| w[1].t_s < w[0].t_s) {
            return bad("overrides must be in time order");
        }
        Ok(())
    }

    fn rule_config(&self) -> RulePolicyConfig {
        match self.policy {
            PolicyKind::NoGrowth => RulePolicyConfig {
                buffer_growth_per_100ms: 0.0,
                ..self.rule.clone()
            },
            _ => self.rule.clone(),
        }
    }

    /// Configuration in force before the first window closes.
    pub fn initial_config(&self) -> Result<StreamConfig, SessionError> {
        match &self.policy {
            PolicyKind::Fixed(label) => {
                Ok(FixedPolicy::new(self.rule.clone(), label)?.initial_config())
            }
            _ => Ok(self.rule.initial_config()),
        }
    }

    fn sim_config(&self, trace: Trace, session_duration_s: f64) -> Result<SimConfig, SessionError> {
        Ok(SimConfig {
            segment_duration_s: self.segment_duration_s,
            startup_threshold_s: self.startup_threshold_s.unwrap_or(self.rule.base_buffer_s),
            trace,
            session_duration_s,
            initial: self.initial_config()?,
        })
    }
}

/// Monitor/decide state: window averaging, policy, hysteresis and user
/// overrides.
pub struct Controller {
    aggregator: Aggregator,
    tracker: Option<FluctuationTracker>,
    hysteresis: Hysteresis,
    policy: Box<dyn Decide + Send>,
    overrides: VecDeque<UserOverride>,
    pinned: Option<Resolution>,
    ladder: crate::model::BitrateLadder,
    windows: Vec<WindowStats>,
}

impl Controller {
    pub fn new(
        cfg: &SessionConfig,
        advisor: Option<Box<dyn AdvisorTransport>>,
    ) -> Result<Self, SessionError> {
        cfg.validate()?;
        let rule = cfg.rule_config();
        let policy: Box<dyn Decide + Send> = match &cfg.policy {
            PolicyKind::Rule | PolicyKind::NoAveraging | PolicyKind::NoGrowth => {
                Box::new(RulePolicy { config: rule })
            }
            PolicyKind::Fixed(label) => Box::new(FixedPolicy::new(rule, label)?),
            PolicyKind::Advisor => {
                let transport = match (advisor, &cfg.advisor_url) {
                    (Some(t), _) => t,
                    (None, Some(url)) => Box::new(HttpAdvisor::new(url.clone())),
                    (None, None) => return Err(SessionError::MissingAdvisor),
                };
                Box::new(AdvisorPolicy::new(transport, rule, cfg.advisor_timeout_ms))
            }
        };
        let (window_s, tracker) = match cfg.policy {
            PolicyKind::NoAveraging => (cfg.probe.interval_s, None),
            _ => (
                cfg.window_s,
                Some(FluctuationTracker::new(cfg.fluct_threshold)),
            ),
        };
        Ok(Self {
            aggregator: Aggregator::new(window_s)?,
            tracker,
            hysteresis: Hysteresis::new(cfg.initial_config()?),
            policy,
            overrides: cfg.overrides.iter().cloned().collect(),
            pinned: None,
            ladder: cfg.rule.ladder.clone(),
            windows: Vec::new(),
        })
    }

    pub fn current(&self) -> &StreamConfig {
        self.hysteresis.current()
    }

    pub fn windows(&self) -> &[WindowStats] {
        &self.windows
    }

    pub fn into_windows(self) -> Vec<WindowStats> {
        self.windows
    }

    /// Override decisions due at or before `t_s`.
    pub fn due_overrides(&mut self, t_s: f64) -> Vec<Decision> {
        let mut out = Vec::new();
        while self.overrides.front().is_some_and(|o| o.t_s <= t_s) {
            let o = self.overrides.pop_front().expect("checked");
            let resolution = self.ladder.get(&o.label).expect("validated").clone();
            let config = rebase_buffer(self.hysteresis.current(), &resolution);
            self.hysteresis.set_current(config.clone());
            self.pinned = Some(resolution);
            out.push(Decision {
                config,
                source: DecisionSource::UserOverride,
                reason: Reason::UserOverride,
                decided_at_s: o.t_s,
            });
        }
        out
    }

    /// Feeds one sample; returns the closed window and its decision, if any.
    pub fn on_sample(
        &mut self,
        sample: NetworkSample,
    ) -> Result<Option<(WindowStats, Decision)>, SessionError> {
        let Some(stats) = self.aggregator.push_sample(sample)? else {
            return Ok(None);
        };
        let candidate = self.policy.decide(&stats, self.hysteresis.current());
        let decision = match (&self.pinned, &mut self.tracker) {
            (Some(pinned), _) => {
                let config = rebase_buffer(&candidate.config, pinned);
                self.hysteresis.set_current(config.clone());
                Decision {
                    config,
                    source: DecisionSource::UserOverride,
                    reason: Reason::OverridePinned,
                    decided_at_s: candidate.decided_at_s,
                }
            }
            (None, Some(tracker)) => {
                let fluct = tracker.classify(&stats);
                self.hysteresis.filter(candidate, fluct)
            }
            (None, None) => self.hysteresis.filter(candidate, Fluctuation::Shifted),
        };
        self.windows.push(stats.clone());
        Ok(Some((stats, decision)))
    }
}

/// Where samples come from.
pub enum Source {
    Trace(Trace),
    /// A recorded metrics log, replayed in sample time.
    Samples(Vec<NetworkSample>),
    Live(LiveProbe<Box<dyn CounterSource + Send>, Box<dyn RoundTripSource + Send>>),
}

/// Optional CSV destinations for activity A's logs.
#[derive(Default)]
pub struct Sinks {
    pub metrics: Option<Box<dyn Write + Send>>,
    pub decisions: Option<Box<dyn Write + Send>>,
}

enum Handoff {
    Sample(NetworkSample),
    Decision(Decision),
}

/// Runs a session over a trace with no logs and no external advisor
/// transport (the advisor policy then needs `advisor_url`).
pub fn run_trace_session(
    trace: &Trace,
    cfg: &SessionConfig,
) -> Result<SessionReport, SessionError> {
    run_session(Source::Trace(trace.clone()), cfg, None, Sinks::default())
}

pub fn run_session(
    source: Source,
    cfg: &SessionConfig,
    advisor: Option<Box<dyn AdvisorTransport>>,
    sinks: Sinks,
) -> Result<SessionReport, SessionError> {
    let mut controller = Controller::new(cfg, advisor)?;
    // in trace mode the simulator is built up front so a short trace fails
    // before either activity starts
    let sim = match &source {
        Source::Trace(trace) => Some(Simulator::new(
            cfg.sim_config(trace.clone(), cfg.session_duration_s)?,
        )?),
        _ => None,
    };
    let mut metrics = sinks.metrics.map(SampleLog::new).transpose()?;
    let mut decision_log = sinks.decisions.map(DecisionLog::new).transpose()?;

    let (tx, rx) = mpsc::channel::<Handoff>();
    let report = std::thread::scope(|scope| {
        let playback = scope.spawn(move || playback_activity(sim, rx, cfg));

        let monitor = monitor_activity(
            source,
            cfg,
            &mut controller,
            &mut metrics,
            &mut decision_log,
            &tx,
        );
        drop(tx);
        let played = playback
            .join()
            .map_err(|_| SessionError::ActivityPanicked("playback"))?;
        monitor?;
        played
    })?;

    if let Some(m) = metrics.as_mut() {
        m.close()?;
    }
    if let Some(d) = decision_log.as_mut() {
        d.close()?;
    }
    Ok(SessionReport {
        windows: controller.into_windows(),
        ..report
    })
}

fn monitor_activity<M: Write, D: Write>(
    source: Source,
    cfg: &SessionConfig,
    controller: &mut Controller,
    metrics: &mut Option<SampleLog<M>>,
    decision_log: &mut Option<DecisionLog<D>>,
    tx: &mpsc::Sender<Handoff>,
) -> Result<(), SessionError> {
    let mut emit = |sample: NetworkSample| -> Result<(), SessionError> {
        let mut out = controller.due_overrides(sample.timestamp_s);
        if let Some(m) = metrics.as_mut() {
            m.log_sample(&sample)?;
        }
        // a closed channel means playback already failed; its error wins
        let _ = tx.send(Handoff::Sample(sample.clone()));
        if let Some((_, d)) = controller.on_sample(sample)? {
            out.push(d);
        }
        for d in out {
            if let Some(log) = decision_log.as_mut() {
                log.log_decision(&d)?;
            }
            let _ = tx.send(Handoff::Decision(d));
        }
        Ok(())
    };

    match source {
        Source::Trace(trace) => {
            for sample in trace_samples(&trace, cfg.probe.interval_s, cfg.session_duration_s) {
                emit(sample)?;
            }
        }
        Source::Samples(samples) => {
            let t0 = samples.first().map_or(0.0, |s| s.timestamp_s);
            for s in samples {
                let rebased = NetworkSample {
                    timestamp_s: s.timestamp_s - t0,
                    ..s
                };
                if rebased.timestamp_s >= cfg.session_duration_s {
                    break;
                }
                emit(rebased)?;
            }
        }
        Source::Live(mut probe) => {
            let interval = Duration::from_secs_f64(cfg.probe.interval_s);
            let started = Instant::now();
            probe.start()?;
            let mut t0 = None;
            let mut tick = started;
            while started.elapsed().as_secs_f64() < cfg.session_duration_s {
                tick += interval;
                if let Some(wait) = tick.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
                let Some(s) = probe.sample()? else { continue };
                let t0 = *t0.get_or_insert(s.timestamp_s);
                emit(NetworkSample {
                    timestamp_s: s.timestamp_s - t0,
                    ..s
                })?;
            }
        }
    }
    Ok(())
}

fn playback_activity(
    sim: Option<Simulator>,
    rx: mpsc::Receiver<Handoff>,
    cfg: &SessionConfig,
) -> Result<SessionReport, SessionError> {
    if let Some(mut sim) = sim {
        for msg in rx {
            if let Handoff::Decision(d) = msg {
                sim.advance_until(d.decided_at_s);
                sim.push_decision(d)?;
            }
        }
        return Ok(sim.finish());
    }

    // recorded or live samples: the network the player sees is the one that
    // was measured, so the trace is assembled as samples arrive
    let mut samples = Vec::new();
    let mut decisions = Vec::new();
    for msg in rx {
        match msg {
            Handoff::Sample(s) => samples.push(s),
            Handoff::Decision(d) => decisions.push(d),
        }
    }
    let trace = trace_from_samples(&samples, cfg.probe.interval_s)?;
    let duration = cfg.session_duration_s.min(trace.duration_s());
    let mut sim = Simulator::new(cfg.sim_config(trace, duration)?)?;
    for d in decisions {
        sim.push_decision(d)?;
    }
    Ok(sim.finish())
}

/// Piecewise-constant trace from measured samples. Failed latency probes
/// carry the previous measured value forward.
pub fn trace_from_samples(
    samples: &[NetworkSample],
    interval_s: f64,
) -> Result<Trace, SessionError> {
    let first = samples.first().ok_or(SessionError::NoSamples)?;
    let t0 = first.timestamp_s;
    let fallback = samples.iter().find_map(|s| s.latency_ms).unwrap_or(1.0);
    let mut last_latency = fallback;
    let points: Vec<TracePoint> = samples
        .iter()
        .map(|s| {
            if let Some(l) = s.latency_ms.filter(|l| *l > 0.0) {
                last_latency = l;
            }
            TracePoint {
                t_s: s.timestamp_s - t0,
                bandwidth_kbps: s.kbps_in,
                latency_ms: last_latency,
            }
        })
        .collect();
    let end = points[points.len() - 1].t_s + interval_s;
    Ok(Trace::new(points, end)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_names_round_trip() {
        for k in [
            PolicyKind::Rule,
            PolicyKind::Advisor,
            PolicyKind::NoAveraging,
            PolicyKind::NoGrowth,
            PolicyKind::Fixed("1080p".into()),
        ] {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("fixed:".parse::<PolicyKind>().is_err());
        assert!("magic".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn advisor_without_transport_is_rejected() {
        let cfg = SessionConfig {
            policy: PolicyKind::Advisor,
            ..SessionConfig::new(10.0)
        };
        assert!(matches!(
            Controller::new(&cfg, None),
            Err(SessionError::MissingAdvisor)
        ));
    }

    #[test]
    fn unknown_override_rung_is_rejected() {
        let cfg = SessionConfig {
            overrides: vec![UserOverride {
                t_s: 1.0,
                label: "8k".into(),
            }],
            ..SessionConfig::new(10.0)
        };
        assert!(matches!(
            Controller::new(&cfg, None),
            Err(SessionError::Policy(_))
        ));
    }

    #[test]
    fn trace_from_samples_fills_missing_latency() {
        let s = |t, k, l| NetworkSample {
            timestamp_s: t,
            kbps_in: k,
            kbps_out: 0.0,
            latency_ms: l,
        };
        let trace = trace_from_samples(
            &[
                s(5.0, 100.0, None),
                s(6.0, 200.0, Some(30.0)),
                s(7.0, 300.0, None),
            ],
            1.0,
        )
        .unwrap();
        let lat: Vec<f64> = trace.points().iter().map(|p| p.latency_ms).collect();
        assert_eq!(lat, vec![30.0, 30.0, 30.0]);
        assert_eq!(trace.points()[0].t_s, 0.0);
        assert_eq!(trace.duration_s(), 3.0);
    }
}
