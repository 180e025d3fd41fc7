//! Synthetic workloads shared by the benchmarks.

use abr_lab_core::{Trace, TracePoint};

/// Square wave between `low` and `high` Kbps, switching every `period_s`.
pub fn square_wave(low: f64, high: f64, period_s: f64, duration_s: f64) -> Trace {
    let steps = (duration_s / period_s).ceil() as usize;
    let points = (0..steps)
        .map(|k| TracePoint {
            t_s: k as f64 * period_s,
            bandwidth_kbps: if k % 2 == 0 { low } else { high },
            latency_ms: 30.0,
        })
        .collect();
    Trace::new(points, duration_s).expect("valid square wave")
}

/// Deterministic pseudo-random walk over 0–16 Mbps, one point per second.
pub fn random_walk(seed: u64, duration_s: usize) -> Trace {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let mut bw = 2000.0f64;
    let points = (0..duration_s)
        .map(|k| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            bw = (bw + (u - 0.5) * 1500.0).clamp(0.0, 16_000.0);
            TracePoint {
                t_s: k as f64,
                bandwidth_kbps: bw,
                latency_ms: 10.0 + 100.0 * u,
            }
        })
        .collect();
    Trace::new(points, duration_s as f64).expect("valid walk")
}
