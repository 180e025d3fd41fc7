#![allow(dead_code)]

pub mod oracle;

use abr_lab_core::model::{
    BitrateLadder, Decision, DecisionSource, Reason, StreamConfig, Trace, TracePoint,
};
use abr_lab_core::sim::SimConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random trace (≤ 120 s, 0–16,000 Kbps, change points on a 0.5 s grid)
/// with a random ordered decision stream of up to 20 decisions.
pub fn random_case(seed: u64) -> (SimConfig, Vec<Decision>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = f64::from(rng.gen_range(20u32..=120));
    let mut points = Vec::new();
    let mut t = 0.0;
    while t < duration {
        let bw = if rng.gen_bool(0.35) {
            rng.gen_range(0.0..400.0)
        } else {
            rng.gen_range(0.0..16_000.0)
        };
        points.push(TracePoint {
            t_s: t,
            bandwidth_kbps: bw,
            latency_ms: rng.gen_range(8.0..145.0),
        });
        t += 0.5 * f64::from(rng.gen_range(1u32..=20));
    }
    let trace = Trace::new(points, duration).unwrap();

    let ladder = BitrateLadder::default();
    let config = |rng: &mut ChaCha8Rng| {
        let rung = &ladder.rungs()[rng.gen_range(0..ladder.len())].resolution;
        let secs = rng.gen_range(1.0..10.0);
        StreamConfig {
            buffer_target_bytes: rung.bytes_for_seconds(secs),
            resolution: rung.clone(),
        }
    };
    let n = rng.gen_range(0..=20);
    let mut times: Vec<f64> = (0..n)
        .map(|_| (rng.gen_range(0.0..duration) * 1000.0).round() / 1000.0)
        .collect();
    times.sort_by(f64::total_cmp);
    let decisions = times
        .into_iter()
        .map(|t| Decision {
            config: config(&mut rng),
            source: DecisionSource::RuleBased,
            reason: Reason::LatencyOk,
            decided_at_s: t,
        })
        .collect();
    let cfg = SimConfig {
        segment_duration_s: 1.0,
        startup_threshold_s: 2.0,
        session_duration_s: duration,
        initial: config(&mut rng),
        trace,
    };
    (cfg, decisions)
}
