//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line, even when all of them pass.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod support;

use std::time::{Duration, Instant};

use abr_lab_core::aggregator::Aggregator;
use abr_lab_core::mock_advisor::{serve, Behavior, FixtureTable};
use abr_lab_core::model::{
    DecisionSource, NetworkSample, StreamConfig, Trace, TracePoint, WindowStats, KILOBITS_PER_BYTE,
};
use abr_lab_core::policy::{rule_decide, RulePolicyConfig};
use abr_lab_core::probe::{compute_data_rate, CounterReading};
use abr_lab_core::session::{
    run_session, run_trace_session, PolicyKind, SessionConfig, Sinks, Source,
};
use abr_lab_core::sim::simulate;
use abr_lab_core::telemetry::{
    read_comparison, read_samples, write_comparison, ComparisonRow, SampleLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{oracle, random_case};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 stable-network quality", stable_network),
        ("2 latency drives buffer", latency_sweep),
        ("3 averaging suppresses churn", averaging_churn),
        ("4 measured window through advisor", measured_window_replay),
        ("5 advisor degradation", advisor_degradation),
        ("6 simulator oracle equivalence", oracle_equivalence),
        ("7 measurement arithmetic", measurement_arithmetic),
        ("8 degraded-link stalls", degraded_link),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("PASS  criterion {name} ({ms} ms): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name} ({ms} ms): {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn stable_network() -> Outcome {
    let started = Instant::now();
    let trace = Trace::constant(1200.0, 20.0, 120.0).map_err(|e| e.to_string())?;
    let r = run_trace_session(&trace, &SessionConfig::new(120.0)).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let last = r.decisions.last().ok_or("no decisions")?;
    ensure!(
        last.config.resolution.label == "1080p",
        "final rung {}",
        last.config.resolution.label
    );
    ensure!(r.stall_count == 0, "{} stalls", r.stall_count);
    ensure!(r.switch_count <= 1, "{} switches", r.switch_count);
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "1080p, 0 stalls, {} switch, startup {} s",
        r.switch_count, r.startup_s
    ))
}

fn latency_sweep() -> Outcome {
    let cfg = RulePolicyConfig::default();
    let window = |lat: f64| WindowStats {
        window_start_s: 0.0,
        window_end_s: 3.0,
        avg_kbps_in: 1200.0,
        avg_latency_ms: Some(lat),
        sample_count: 3,
    };
    // 8 → 145 ms in 0.25 ms steps
    let sweep: Vec<(f64, StreamConfig)> = (32..=580)
        .map(|q| {
            let lat = f64::from(q) / 4.0;
            (lat, rule_decide(&cfg, &window(lat)).config)
        })
        .collect();
    let base = sweep[0].1.buffer_target_bytes;
    for w in sweep.windows(2) {
        let ((_, a), (lat, b)) = (&w[0], &w[1]);
        ensure!(b.resolution == a.resolution, "rung changed at {lat} ms");
        if *lat <= 100.0 {
            ensure!(b.buffer_target_bytes == base, "buffer moved at {lat} ms");
        } else {
            ensure!(
                b.buffer_target_bytes > a.buffer_target_bytes,
                "buffer not increasing at {lat} ms"
            );
        }
    }
    ensure!(
        sweep[0].1.resolution.label == "1080p",
        "rung {}",
        sweep[0].1.resolution.label
    );

    // the same holds end to end on constant traces
    let mut targets = Vec::new();
    for lat in [8.0, 50.0, 100.0, 120.0, 145.0] {
        let trace = Trace::constant(1200.0, lat, 30.0).map_err(|e| e.to_string())?;
        let r = run_trace_session(&trace, &SessionConfig::new(30.0)).map_err(|e| e.to_string())?;
        let d = r.decisions.last().ok_or("no decisions")?;
        ensure!(
            d.config.resolution.label == "1080p",
            "rung {} at {lat} ms",
            d.config.resolution.label
        );
        targets.push(d.config.buffer_target_bytes);
    }
    ensure!(
        targets[0] == targets[1] && targets[1] == targets[2],
        "flat part moved: {targets:?}"
    );
    ensure!(
        targets[2] < targets[3] && targets[3] < targets[4],
        "not increasing: {targets:?}"
    );
    let top = sweep.last().unwrap().1.buffer_target_bytes;
    Ok(format!(
        "{base} bytes up to 100 ms, {top} bytes at 145 ms, 1080p throughout"
    ))
}

fn square_wave(low: f64, high: f64, duration_s: f64) -> Trace {
    let points = (0..duration_s as u32)
        .map(|k| TracePoint {
            t_s: f64::from(k),
            bandwidth_kbps: if k % 2 == 0 { low } else { high },
            latency_ms: 20.0,
        })
        .collect();
    Trace::new(points, duration_s).unwrap()
}

fn averaging_churn() -> Outcome {
    let trace = square_wave(400.0, 1600.0, 120.0);
    let windowed =
        run_trace_session(&trace, &SessionConfig::new(120.0)).map_err(|e| e.to_string())?;
    let raw = run_trace_session(
        &trace,
        &SessionConfig {
            policy: PolicyKind::NoAveraging,
            ..SessionConfig::new(120.0)
        },
    )
    .map_err(|e| e.to_string())?;
    ensure!(
        windowed.switch_count < raw.switch_count,
        "windowed {} vs no-averaging {}",
        windowed.switch_count,
        raw.switch_count
    );
    ensure!(
        windowed.switch_count <= 2,
        "windowed run switched {} times",
        windowed.switch_count
    );
    Ok(format!(
        "{} switches windowed vs {} without averaging",
        windowed.switch_count, raw.switch_count
    ))
}

fn measured_window_replay() -> Outcome {
    let measured = [
        (1289.52, 341.71),
        (1462.85, 1247.46),
        (1526.92, 1880.94),
        (1109.15, 1789.82),
    ];
    let samples: Vec<NetworkSample> = measured
        .iter()
        .enumerate()
        .map(|(i, &(lat, kbps))| NetworkSample {
            timestamp_s: i as f64,
            kbps_in: kbps,
            kbps_out: 0.0,
            latency_ms: Some(lat),
        })
        .collect();

    // the four samples form exactly one window
    let mut agg = Aggregator::new(3.0).map_err(|e| e.to_string())?;
    let mut closed = Vec::new();
    for s in &samples {
        closed.extend(agg.push_sample(s.clone()).map_err(|e| e.to_string())?);
    }
    ensure!(
        closed.len() == 1 && closed[0].sample_count == 4,
        "windows {closed:?}"
    );

    let server = serve("127.0.0.1:0", FixtureTable::bundled(), Behavior::Normal)
        .map_err(|e| e.to_string())?;
    let cfg = SessionConfig {
        policy: PolicyKind::Advisor,
        advisor_url: Some(server.url()),
        ..SessionConfig::new(4.0)
    };
    let r = run_session(Source::Samples(samples), &cfg, None, Sinks::default())
        .map_err(|e| e.to_string())?;
    ensure!(r.decisions.len() == 1, "{} decisions", r.decisions.len());
    let d = &r.decisions[0];
    ensure!(r.applied_decisions() == vec![0], "decision not applied");
    ensure!(
        d.config.resolution.label == "1080p",
        "rung {}",
        d.config.resolution.label
    );
    ensure!(
        d.config.buffer_target_bytes == 1_355_984,
        "buffer {}",
        d.config.buffer_target_bytes
    );
    ensure!(d.source == DecisionSource::Advisor, "source {:?}", d.source);
    Ok(format!(
        "window avg {:.4} Kbps / {:.2} ms -> 1080p, 1355984 bytes, advisor",
        closed[0].avg_kbps_in,
        closed[0].avg_latency_ms.unwrap_or(f64::NAN)
    ))
}

fn degraded_trace() -> Trace {
    // latency climbs for 10 s while the link still has headroom, then
    // bandwidth collapses to 200 Kbps for 20 s
    let p = |t_s, bandwidth_kbps, latency_ms| TracePoint {
        t_s,
        bandwidth_kbps,
        latency_ms,
    };
    Trace::new(
        vec![
            p(0.0, 2500.0, 20.0),
            p(40.0, 2500.0, 600.0),
            p(50.0, 200.0, 900.0),
            p(70.0, 2500.0, 20.0),
        ],
        120.0,
    )
    .unwrap()
}

fn advisor_degradation() -> Outcome {
    let trace = degraded_trace();
    let server =
        serve("127.0.0.1:0", FixtureTable::bundled(), Behavior::Drop).map_err(|e| e.to_string())?;
    let cfg = SessionConfig {
        policy: PolicyKind::Advisor,
        advisor_url: Some(server.url()),
        advisor_timeout_ms: 200,
        ..SessionConfig::new(60.0)
    };
    let advised = run_session(Source::Trace(trace.clone()), &cfg, None, Sinks::default())
        .map_err(|e| e.to_string())?;
    let rule = run_trace_session(&trace, &SessionConfig::new(60.0)).map_err(|e| e.to_string())?;
    ensure!(!advised.decisions.is_empty(), "no decisions");
    ensure!(
        advised
            .decisions
            .iter()
            .all(|d| d.source == DecisionSource::AdvisorFallback),
        "not every decision fell back"
    );
    ensure!(
        advised.decisions.len() == rule.decisions.len(),
        "{} vs {}",
        advised.decisions.len(),
        rule.decisions.len()
    );
    for (i, (a, r)) in advised.decisions.iter().zip(&rule.decisions).enumerate() {
        ensure!(
            a.config == r.config && a.decided_at_s == r.decided_at_s,
            "decision {i} differs: {a:?} vs {r:?}"
        );
    }
    ensure!(advised.events == rule.events, "playback diverged");
    Ok(format!(
        "{} decisions, all advisor-fallback, identical to rule",
        advised.decisions.len()
    ))
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let (cfg, decisions) = random_case(1000 + seed);
        let r = simulate(cfg.clone(), decisions.clone()).map_err(|e| e.to_string())?;
        let o = oracle::run(&cfg, &decisions);
        ensure!(
            r.stall_count == o.stall_count,
            "seed {seed}: {} vs oracle {}",
            r.stall_count,
            o.stall_count
        );
        let gap = (r.total_stall_s - o.total_stall_s).abs();
        ensure!(
            gap <= 2.0 * cfg.segment_duration_s,
            "seed {seed}: stall time off by {gap}"
        );
        worst = worst.max(gap);
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("50 cases, worst stall-time gap {worst:.3} s"))
}

fn measurement_arithmetic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let prev = CounterReading {
            timestamp_s: rng.gen_range(0.0..1e5),
            rx_bytes: rng.gen_range(0..u64::MAX / 2),
            tx_bytes: rng.gen_range(0..u64::MAX / 2),
        };
        let curr = CounterReading {
            timestamp_s: prev.timestamp_s + rng.gen_range(0.001..60.0),
            rx_bytes: prev.rx_bytes + rng.gen_range(0..1u64 << 40),
            tx_bytes: prev.tx_bytes + rng.gen_range(0..1u64 << 40),
        };
        let (kin, kout) = compute_data_rate(&prev, &curr).map_err(|e| e.to_string())?;
        let dt = curr.timestamp_s - prev.timestamp_s;
        let hand_in = (curr.rx_bytes - prev.rx_bytes) as f64 * 8.0 / 1000.0 / dt;
        let hand_out = (curr.tx_bytes - prev.tx_bytes) as f64 * 8.0 / 1000.0 / dt;
        ensure!(
            kin.to_bits()
                == ((curr.rx_bytes - prev.rx_bytes) as f64 * KILOBITS_PER_BYTE / dt).to_bits(),
            "pair {i}: rate {kin}"
        );
        ensure!(
            (kin - hand_in).abs() <= kin.abs() * 1e-15
                && (kout - hand_out).abs() <= kout.abs() * 1e-15,
            "pair {i}"
        );
    }

    for case in 0..200 {
        let n = rng.gen_range(4..40);
        let mut agg = Aggregator::new(3.0).map_err(|e| e.to_string())?;
        let mut pending = Vec::new();
        for k in 0..n {
            let s = NetworkSample {
                timestamp_s: f64::from(k),
                kbps_in: rng.gen_range(0.0..16_000.0),
                kbps_out: 0.0,
                latency_ms: rng.gen_bool(0.8).then(|| rng.gen_range(1.0..2000.0)),
            };
            pending.push(s.clone());
            if let Some(w) = agg.push_sample(s).map_err(|e| e.to_string())? {
                let lo = pending
                    .iter()
                    .map(|s| s.kbps_in)
                    .fold(f64::INFINITY, f64::min);
                let hi = pending
                    .iter()
                    .map(|s| s.kbps_in)
                    .fold(f64::NEG_INFINITY, f64::max);
                ensure!(
                    lo <= w.avg_kbps_in && w.avg_kbps_in <= hi,
                    "case {case}: mean outside range"
                );
                let lats: Vec<f64> = pending.iter().filter_map(|s| s.latency_ms).collect();
                match w.avg_latency_ms {
                    Some(l) => {
                        let lo = lats.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = lats.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        ensure!(
                            lo <= l && l <= hi,
                            "case {case}: latency mean outside range"
                        );
                    }
                    None => ensure!(lats.is_empty(), "case {case}: latency dropped"),
                }
                pending.clear();
            }
        }
    }

    // logs and comparison tables round-trip
    let mut buf = Vec::new();
    let mut log = SampleLog::new(&mut buf).map_err(|e| e.to_string())?;
    let mut samples = Vec::new();
    for k in 0..500 {
        let s = NetworkSample {
            timestamp_s: f64::from(k) / 4.0,
            kbps_in: f64::from(rng.gen_range(0..1_600_000u32)) / 100.0,
            kbps_out: f64::from(rng.gen_range(0..100_000u32)) / 100.0,
            latency_ms: rng
                .gen_bool(0.9)
                .then(|| f64::from(rng.gen_range(0..200_000u32)) / 100.0),
        };
        log.log_sample(&s).map_err(|e| e.to_string())?;
        samples.push(s);
    }
    log.close().map_err(|e| e.to_string())?;
    let back = read_samples(&buf[..]).map_err(|e| e.to_string())?;
    ensure!(back == samples, "metrics log did not round-trip");

    let rows: Vec<ComparisonRow> = (0..50)
        .map(|i| ComparisonRow {
            policy: format!("p{i}"),
            stall_count: rng.gen_range(0..100),
            total_stall_s: rng.gen_range(0.0..120.0),
            rebuffer_ratio: rng.gen_range(0.0..1.0),
            switch_count: rng.gen_range(0..100),
            avg_height: rng.gen_range(0.0..2160.0),
            qoe: rng.gen_range(-5.0..2.0),
        })
        .collect();
    let mut table = Vec::new();
    write_comparison(&rows, &mut table).map_err(|e| e.to_string())?;
    ensure!(
        read_comparison(&table[..]).map_err(|e| e.to_string())? == rows,
        "comparison table did not round-trip"
    );

    // whole-session replay writes byte-identical logs
    let trace = degraded_trace();
    let logs = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (m, d) = (dir.path().join("m.csv"), dir.path().join("d.csv"));
        let sinks = Sinks {
            metrics: Some(Box::new(
                std::fs::File::create(&m).map_err(|e| e.to_string())?,
            )),
            decisions: Some(Box::new(
                std::fs::File::create(&d).map_err(|e| e.to_string())?,
            )),
        };
        run_session(
            Source::Trace(trace.clone()),
            &SessionConfig::new(120.0),
            None,
            sinks,
        )
        .map_err(|e| e.to_string())?;
        Ok((
            std::fs::read(&m).map_err(|e| e.to_string())?,
            std::fs::read(&d).map_err(|e| e.to_string())?,
        ))
    };
    let (a, b) = (logs()?, logs()?);
    ensure!(!a.0.is_empty() && !a.1.is_empty(), "empty logs");
    ensure!(a == b, "session logs differ between runs");
    Ok(
        "1000 rate pairs exact, 200 window cases bounded, CSV round-trips, replay byte-identical"
            .into(),
    )
}

fn degraded_link() -> Outcome {
    let trace = degraded_trace();
    let run = |policy: PolicyKind| {
        run_trace_session(
            &trace,
            &SessionConfig {
                policy,
                ..SessionConfig::new(120.0)
            },
        )
        .map_err(|e| e.to_string())
    };
    let rule = run(PolicyKind::Rule)?;
    let fixed = run(PolicyKind::Fixed("1080p".into()))?;
    let flat = run(PolicyKind::NoGrowth)?;
    ensure!(
        rule.total_stall_s < fixed.total_stall_s,
        "rule {:.3} s vs fixed-1080p {:.3} s",
        rule.total_stall_s,
        fixed.total_stall_s
    );
    ensure!(
        flat.total_stall_s >= rule.total_stall_s,
        "no-growth {:.3} s vs rule {:.3} s",
        flat.total_stall_s,
        rule.total_stall_s
    );
    Ok(format!(
        "stall time: rule {:.3} s, no-growth {:.3} s, fixed-1080p {:.3} s",
        rule.total_stall_s, flat.total_stall_s, fixed.total_stall_s
    ))
}
