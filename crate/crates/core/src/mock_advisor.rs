//! Local stand-in for the advisor service.
//!
//! Answers advisor requests from a fixture table (first match wins, with a
//! required last-resort reply) and can inject delay, silence or garbage.

use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{AdvisorRequest, AdvisorResponse};

/// Fixture table matching the measured-log case: high latency, roughly
/// 1.3 Mbps inbound, answered with 1080p and a 1,355,984-byte buffer.
pub const BUNDLED_FIXTURES: &str = include_str!("../fixtures/advisor_fixtures.json");

#[derive(Debug, Error)]
pub enum MockAdvisorError {
    #[error("cannot bind mock advisor to {addr}: {msg}")]
    BindError { addr: String, msg: String },
    #[error("fixtures {0} and {1} overlap")]
    OverlappingFixtures(usize, usize),
    #[error("fixture {0}: range lower bound exceeds upper bound")]
    InvalidRange(usize),
    #[error("unknown behavior {0:?} (expected normal, delay:<ms>, drop or malformed)")]
    UnknownBehavior(String),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Closed interval; `None` bounds are open-ended.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Range {
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl Range {
    fn contains(&self, v: f64) -> bool {
        self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }

    fn intersects(&self, other: &Range) -> bool {
        let lo = match (self.min, other.min) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        let hi = match (self.max, other.max) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        match (lo, hi) {
            (Some(lo), Some(hi)) => lo <= hi,
            _ => true,
        }
    }

    fn is_valid(&self) -> bool {
        match (self.min, self.max) {
            (Some(a), Some(b)) => a <= b,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub name: String,
    /// A request without latency never matches a latency range.
    #[serde(default)]
    pub avg_latency_ms: Option<Range>,
    #[serde(default)]
    pub avg_kbps_in: Option<Range>,
    pub response: AdvisorResponse,
}

impl Fixture {
    fn matches(&self, req: &AdvisorRequest) -> bool {
        let latency_ok = match (&self.avg_latency_ms, req.avg_latency_ms) {
            (None, _) => true,
            (Some(r), Some(l)) => r.contains(l),
            (Some(_), None) => false,
        };
        latency_ok && self.avg_kbps_in.is_none_or(|r| r.contains(req.avg_kbps_in))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTable {
    pub fixtures: Vec<Fixture>,
    /// Reply for requests no fixture matches.
    pub default: AdvisorResponse,
}

impl FixtureTable {
    pub fn new(fixtures: Vec<Fixture>, default: AdvisorResponse) -> Result<Self, MockAdvisorError> {
        let table = Self { fixtures, default };
        table.validate()?;
        Ok(table)
    }

    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_FIXTURES).expect("bundled fixtures are valid")
    }

    pub fn from_json(text: &str) -> Result<Self, MockAdvisorError> {
        let table: Self = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, MockAdvisorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), MockAdvisorError> {
        let full = Range::default();
        for (i, f) in self.fixtures.iter().enumerate() {
            let ranges = [f.avg_latency_ms, f.avg_kbps_in];
            if ranges.iter().flatten().any(|r| !r.is_valid()) {
                return Err(MockAdvisorError::InvalidRange(i));
            }
            for (j, g) in self.fixtures.iter().enumerate().skip(i + 1) {
                let lat = f
                    .avg_latency_ms
                    .unwrap_or(full)
                    .intersects(&g.avg_latency_ms.unwrap_or(full));
                let kbps = f
                    .avg_kbps_in
                    .unwrap_or(full)
                    .intersects(&g.avg_kbps_in.unwrap_or(full));
                if lat && kbps {
                    return Err(MockAdvisorError::OverlappingFixtures(i, j));
                }
            }
        }
        Ok(())
    }

    /// First matching fixture's reply, else the default.
    pub fn respond(&self, req: &AdvisorRequest) -> &AdvisorResponse {
        self.fixtures
            .iter()
            .find(|f| f.matches(req))
            .map_or(&self.default, |f| &f.response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Normal,
    Delay(u64),
    /// Accept the request and never answer.
    Drop,
    /// Answer with a body that is not a valid reply.
    Malformed,
}

impl FromStr for Behavior {
    type Err = MockAdvisorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Self::Normal),
            "drop" => Ok(Self::Drop),
            "malformed" => Ok(Self::Malformed),
            other => other
                .strip_prefix("delay:")
                .and_then(|ms| ms.parse().ok())
                .map(Self::Delay)
                .ok_or_else(|| MockAdvisorError::UnknownBehavior(other.to_string())),
        }
    }
}

/// Running server; stops when dropped.
pub struct MockAdvisorHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
}

impl MockAdvisorHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Endpoint to POST requests to.
    pub fn url(&self) -> String {
        format!("http://{}/advise", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockAdvisorHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts the mock on `addr` (use port 0 for an ephemeral port).
pub fn serve(
    addr: &str,
    fixtures: FixtureTable,
    behavior: Behavior,
) -> Result<MockAdvisorHandle, MockAdvisorError> {
    let server = tiny_http::Server::http(addr).map_err(|e| MockAdvisorError::BindError {
        addr: addr.to_string(),
        msg: e.to_string(),
    })?;
    let bound = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| MockAdvisorError::BindError {
            addr: addr.to_string(),
            msg: "not an IP listener".into(),
        })?;
    let server = Arc::new(server);
    let shutdown = Arc::new(AtomicBool::new(false));
    let fixtures = Arc::new(fixtures);
    let thread = {
        let server = Arc::clone(&server);
        let shutdown = Arc::clone(&shutdown);
        std::thread::spawn(move || accept_loop(&server, &shutdown, &fixtures, behavior))
    };
    Ok(MockAdvisorHandle {
        addr: bound,
        shutdown,
        server,
        thread: Some(thread),
    })
}

fn accept_loop(
    server: &tiny_http::Server,
    shutdown: &Arc<AtomicBool>,
    fixtures: &Arc<FixtureTable>,
    behavior: Behavior,
) {
    let mut workers = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match server.recv_timeout(Duration::from_millis(50)) {
            Ok(Some(req)) => {
                let fixtures = Arc::clone(fixtures);
                let shutdown = Arc::clone(shutdown);
                workers.push(std::thread::spawn(move || {
                    handle(req, &fixtures, behavior, &shutdown)
                }));
            }
            Ok(None) => {}
            Err(e) => {
                log::error!("mock advisor: {e}");
                break;
            }
        }
        workers.retain(|w: &JoinHandle<()>| !w.is_finished());
    }
    for w in workers {
        let _ = w.join();
    }
}

fn json_response(status: u16, body: String) -> tiny_http::Response<std::io::Cursor<Vec<u8>>> {
    let header =
        tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    tiny_http::Response::from_string(body)
        .with_status_code(status)
        .with_header(header)
}

fn handle(
    mut req: tiny_http::Request,
    fixtures: &FixtureTable,
    behavior: Behavior,
    shutdown: &AtomicBool,
) {
    if *req.method() != tiny_http::Method::Post {
        // plain GETs double as a latency target
        let _ = req.respond(tiny_http::Response::from_string("ok"));
        return;
    }
    let mut body = String::new();
    if let Err(e) = req.as_reader().read_to_string(&mut body) {
        let _ = req.respond(json_response(
            400,
            format!("{{\"error\":{:?}}}", e.to_string()),
        ));
        return;
    }
    let parsed: Result<AdvisorRequest, _> = serde_json::from_str(&body);
    let advisor_req = match parsed {
        Ok(r) => r,
        Err(e) => {
            let _ = req.respond(json_response(
                400,
                format!("{{\"error\":{:?}}}", e.to_string()),
            ));
            return;
        }
    };
    match behavior {
        Behavior::Drop => {
            // hold the connection open without answering
            while !shutdown.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(20));
            }
            return;
        }
        Behavior::Delay(ms) => std::thread::sleep(Duration::from_millis(ms)),
        Behavior::Malformed => {
            let _ = req.respond(json_response(
                200,
                "{\"resolution\": 1080, \"buffer_bytes\": ".into(),
            ));
            return;
        }
        Behavior::Normal => {}
    }
    let reply = fixtures.respond(&advisor_req);
    let body = serde_json::to_string(reply).expect("response serializes");
    let _ = req.respond(json_response(200, body));
}
