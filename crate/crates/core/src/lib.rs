//! Adaptive streaming control loop: probe the network, average over
//! tumbling windows, decide a rung and buffer size, and measure the
//! outcome in a trace-driven playback simulator.

// `!(a < b)` is used on purpose wherever a NaN must fail the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advisor;
pub mod aggregator;
pub mod mock_advisor;
pub mod model;
pub mod policy;
pub mod probe;
pub mod session;
pub mod sim;
pub mod telemetry;

pub use advisor::{
    advisor_decide, AdvisorPolicy, AdvisorRequest, AdvisorResponse, AdvisorTransport, HttpAdvisor,
};
pub use aggregator::{classify_fluctuation, Aggregator, Fluctuation, FluctuationTracker};
pub use model::{
    BitrateLadder, Decision, DecisionSource, NetworkSample, Reason, Resolution, Rung, StreamConfig,
    Trace, TracePoint, WindowStats,
};
pub use policy::{rule_decide, Decide, FixedPolicy, Hysteresis, RulePolicy, RulePolicyConfig};
pub use probe::{compute_data_rate, measure_latency, trace_sample, CounterReading, ProbeConfig};
pub use sim::{
    compute_qoe, simulate, PlaybackState, QoeWeights, SessionReport, SimConfig, Simulator,
};
