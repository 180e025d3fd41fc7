//! Network probing.
//!
//! Data rate comes from deltas of cumulative interface byte counters;
//! latency from timing one round trip to a target. Both sit behind small
//! traits so the arithmetic can be tested without real interfaces. In
//! simulation mode samples are read off a [`Trace`] instead.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{NetworkSample, Trace, KILOBITS_PER_BYTE};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("byte counter went backwards ({prev} -> {curr}); re-baseline")]
    CounterWrap { prev: u64, curr: u64 },
    #[error("reading timestamps must strictly increase ({prev} -> {curr})")]
    InvalidInterval { prev: f64, curr: f64 },
    #[error("round-trip probe failed: {0}")]
    ProbeFailed(ProbeFailure),
    #[error("t = {t_s} s is outside the trace [0, {duration_s}]")]
    OutOfRange { t_s: f64, duration_s: f64 },
    #[error(transparent)]
    Source(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeFailure {
    Timeout,
    Other(String),
}

impl std::fmt::Display for ProbeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Timeout => f.write_str("timeout"),
            Self::Other(msg) => f.write_str(msg),
        }
    }
}

/// Cumulative interface byte counters at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterReading {
    pub timestamp_s: f64,
    pub rx_bytes: u64,
    pub tx_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub interval_s: f64,
    pub latency_timeout_ms: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            interval_s: 1.0,
            latency_timeout_ms: 2000,
        }
    }
}

/// Inbound and outbound rates in Kbps between two counter readings.
pub fn compute_data_rate(
    prev: &CounterReading,
    curr: &CounterReading,
) -> Result<(f64, f64), ProbeError> {
    if !(curr.timestamp_s > prev.timestamp_s) {
        return Err(ProbeError::InvalidInterval {
            prev: prev.timestamp_s,
            curr: curr.timestamp_s,
        });
    }
    let delta = |p: u64, c: u64| {
        c.checked_sub(p)
            .ok_or(ProbeError::CounterWrap { prev: p, curr: c })
    };
    let rx = delta(prev.rx_bytes, curr.rx_bytes)?;
    let tx = delta(prev.tx_bytes, curr.tx_bytes)?;
    let dt = curr.timestamp_s - prev.timestamp_s;
    Ok((
        rx as f64 * KILOBITS_PER_BYTE / dt,
        tx as f64 * KILOBITS_PER_BYTE / dt,
    ))
}

/// Something that reports cumulative byte counters.
pub trait CounterSource {
    fn read(&mut self) -> std::io::Result<CounterReading>;
}

impl<T: CounterSource + ?Sized> CounterSource for Box<T> {
    fn read(&mut self) -> std::io::Result<CounterReading> {
        (**self).read()
    }
}

/// Something a single round trip can be timed against.
///
/// Implementations must give up once `timeout` has elapsed.
pub trait RoundTripSource {
    fn round_trip(&self, timeout: Duration) -> Result<(), ProbeFailure>;
}

impl<T: RoundTripSource + ?Sized> RoundTripSource for Box<T> {
    fn round_trip(&self, timeout: Duration) -> Result<(), ProbeFailure> {
        (**self).round_trip(timeout)
    }
}

/// Times one round trip. A failure never yields a number.
pub fn measure_latency<P: RoundTripSource + ?Sized>(
    prober: &P,
    timeout_ms: u64,
) -> Result<f64, ProbeError> {
    let timeout = Duration::from_millis(timeout_ms);
    let start = Instant::now();
    prober
        .round_trip(timeout)
        .map_err(ProbeError::ProbeFailed)?;
    let elapsed = start.elapsed();
    if elapsed > timeout {
        return Err(ProbeError::ProbeFailed(ProbeFailure::Timeout));
    }
    Ok(elapsed.as_secs_f64() * 1000.0)
}

/// Sends one byte over TCP and waits for one byte back.
#[derive(Debug, Clone)]
pub struct TcpEchoRoundTrip {
    pub addr: SocketAddr,
}

impl RoundTripSource for TcpEchoRoundTrip {
    fn round_trip(&self, timeout: Duration) -> Result<(), ProbeFailure> {
        let deadline = Instant::now() + timeout;
        let remaining = || {
            deadline
                .checked_duration_since(Instant::now())
                .filter(|d| !d.is_zero())
                .ok_or(ProbeFailure::Timeout)
        };
        let mut stream =
            TcpStream::connect_timeout(&self.addr, remaining()?).map_err(io_failure)?;
        stream.set_nodelay(true).ok();
        stream.write_all(b"p").map_err(io_failure)?;
        stream
            .set_read_timeout(Some(remaining()?))
            .map_err(io_failure)?;
        let mut buf = [0u8; 1];
        match stream.read(&mut buf) {
            Ok(1) => Ok(()),
            Ok(_) => Err(ProbeFailure::Other("connection closed".into())),
            Err(e) => Err(io_failure(e)),
        }
    }
}

/// Issues an HTTP GET and waits for the response head.
#[derive(Debug, Clone)]
pub struct HttpRoundTrip {
    pub url: String,
}

impl RoundTripSource for HttpRoundTrip {
    fn round_trip(&self, timeout: Duration) -> Result<(), ProbeFailure> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        match agent.get(&self.url).call() {
            // any HTTP status counts as a completed round trip
            Ok(_) | Err(ureq::Error::Status(..)) => Ok(()),
            Err(ureq::Error::Transport(t)) => Err(transport_failure(&t)),
        }
    }
}

fn io_failure(e: std::io::Error) -> ProbeFailure {
    match e.kind() {
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => ProbeFailure::Timeout,
        _ => ProbeFailure::Other(e.to_string()),
    }
}

pub(crate) fn transport_is_timeout(t: &ureq::Transport) -> bool {
    let mut source = std::error::Error::source(t);
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<std::io::Error>() {
            if matches!(
                io.kind(),
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
            ) {
                return true;
            }
        }
        source = err.source();
    }
    t.to_string().contains("timed out")
}

fn transport_failure(t: &ureq::Transport) -> ProbeFailure {
    if transport_is_timeout(t) {
        ProbeFailure::Timeout
    } else {
        ProbeFailure::Other(t.to_string())
    }
}

/// Linux `/proc/net/dev` counters, summed over every interface except
/// loopback unless a specific interface is named.
#[derive(Debug)]
pub struct ProcNetDev {
    interface: Option<String>,
    started: Instant,
}

impl ProcNetDev {
    pub fn new(interface: Option<String>) -> Self {
        Self {
            interface,
            started: Instant::now(),
        }
    }

    fn parse(&self, text: &str) -> std::io::Result<(u64, u64)> {
        let mut rx = 0u64;
        let mut tx = 0u64;
        let mut seen = false;
        for line in text.lines().skip(2) {
            let Some((name, rest)) = line.split_once(':') else {
                continue;
            };
            let name = name.trim();
            let wanted = match &self.interface {
                Some(iface) => name == iface,
                None => name != "lo",
            };
            if !wanted {
                continue;
            }
            let fields: Vec<u64> = rest
                .split_whitespace()
                .map(|f| f.parse().unwrap_or(0))
                .collect();
            if fields.len() < 9 {
                continue;
            }
            rx = rx.wrapping_add(fields[0]);
            tx = tx.wrapping_add(fields[8]);
            seen = true;
        }
        if !seen {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no matching interface ({:?})", self.interface),
            ));
        }
        Ok((rx, tx))
    }
}

impl CounterSource for ProcNetDev {
    fn read(&mut self) -> std::io::Result<CounterReading> {
        let text = std::fs::read_to_string("/proc/net/dev")?;
        let timestamp_s = self.started.elapsed().as_secs_f64();
        let (rx_bytes, tx_bytes) = self.parse(&text)?;
        Ok(CounterReading {
            timestamp_s,
            rx_bytes,
            tx_bytes,
        })
    }
}

/// Live sampler: one counter delta plus one latency probe per call.
///
/// A counter that goes backwards discards that pair and re-baselines.
pub struct LiveProbe<C, P> {
    counters: C,
    prober: Option<P>,
    config: ProbeConfig,
    baseline: Option<CounterReading>,
}

impl<C: CounterSource, P: RoundTripSource> LiveProbe<C, P> {
    pub fn new(counters: C, prober: Option<P>, config: ProbeConfig) -> Self {
        Self {
            counters,
            prober,
            config,
            baseline: None,
        }
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    /// Takes the baseline reading.
    pub fn start(&mut self) -> Result<(), ProbeError> {
        self.baseline = Some(self.counters.read()?);
        Ok(())
    }

    /// Produces the next sample from the counter delta since the previous
    /// call. `Ok(None)` means the pair was discarded (counter reset).
    pub fn sample(&mut self) -> Result<Option<NetworkSample>, ProbeError> {
        let curr = self.counters.read()?;
        let Some(prev) = self.baseline.replace(curr) else {
            return Ok(None);
        };
        let (kbps_in, kbps_out) = match compute_data_rate(&prev, &curr) {
            Ok(rates) => rates,
            Err(ProbeError::CounterWrap { prev, curr }) => {
                log::warn!("counter reset ({prev} -> {curr}), re-baselining");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let latency_ms = match &self.prober {
            Some(p) => match measure_latency(p, self.config.latency_timeout_ms) {
                Ok(ms) => Some(ms),
                Err(e) => {
                    log::debug!("latency probe: {e}");
                    None
                }
            },
            None => None,
        };
        Ok(Some(NetworkSample {
            timestamp_s: curr.timestamp_s,
            kbps_in,
            kbps_out,
            latency_ms,
        }))
    }
}

/// Reads the network state a trace prescribes at `t_s`.
pub fn trace_sample(trace: &Trace, t_s: f64) -> Result<NetworkSample, ProbeError> {
    if !(0.0..=trace.duration_s()).contains(&t_s) {
        return Err(ProbeError::OutOfRange {
            t_s,
            duration_s: trace.duration_s(),
        });
    }
    let p = trace.point_at(t_s);
    Ok(NetworkSample {
        timestamp_s: t_s,
        kbps_in: p.bandwidth_kbps,
        kbps_out: 0.0,
        latency_ms: Some(p.latency_ms),
    })
}

/// Samples a trace every `interval_s` over `[0, until_s)`.
pub fn trace_samples(
    trace: &Trace,
    interval_s: f64,
    until_s: f64,
) -> impl Iterator<Item = NetworkSample> + '_ {
    // integer step index keeps timestamps free of accumulated rounding
    (0u64..)
        .map(move |k| k as f64 * interval_s)
        .take_while(move |&t| t < until_s && t <= trace.duration_s())
        .map(move |t| trace_sample(trace, t).expect("t within trace"))
}
