use std::fs::File;
use std::io::Write;
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use abr_lab_core::mock_advisor::{self, Behavior, FixtureTable, MockAdvisorHandle};
use abr_lab_core::model::{BitrateLadder, Trace};
use abr_lab_core::probe::{
    CounterSource, HttpRoundTrip, LiveProbe, ProbeConfig, ProcNetDev, RoundTripSource,
    TcpEchoRoundTrip,
};
use abr_lab_core::session::{run_session, PolicyKind, SessionConfig, Sinks, Source, UserOverride};
use abr_lab_core::telemetry::{
    create_file, emit_report, read_samples, write_comparison, write_events, write_report_json,
    write_window_series, ComparisonRow, EmitFormat, SampleLog,
};
use abr_lab_core::{compute_qoe, QoeWeights, SessionReport};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "abr-lab", version, about = "Adaptive streaming control lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session over a trace (or live probing when no trace is given).
    Run(RunArgs),
    /// Run several policies over the same trace and tabulate them.
    Compare(CompareArgs),
    /// Sample the local link and log it.
    Probe(ProbeArgs),
    /// Re-decide over a recorded metrics log.
    Replay(ReplayArgs),
    /// Serve the advisor protocol from a fixture table.
    MockAdvisor(MockArgs),
}

#[derive(Args, Clone)]
struct ControlArgs {
    /// Aggregation window in seconds.
    #[arg(long, default_value_t = 3.0)]
    window: f64,
    /// Relative change that counts as a level shift.
    #[arg(long, default_value_t = 0.15)]
    fluct_threshold: f64,
    /// Seconds between samples.
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    /// Ladder CSV (`label,height,nominal_kbps,threshold_kbps`).
    #[arg(long)]
    ladder: Option<PathBuf>,
    #[arg(long)]
    advisor_url: Option<String>,
    #[arg(long, default_value_t = 1000)]
    advisor_timeout_ms: u64,
    /// Seconds of media per segment.
    #[arg(long, default_value_t = 1.0)]
    segment: f64,
    /// Buffered seconds before playback starts (defaults to the base buffer).
    #[arg(long)]
    startup: Option<f64>,
    /// Scripted rung change, `<t_s>:<label>`; repeatable.
    #[arg(long = "override", value_parser = parse_override)]
    overrides: Vec<UserOverride>,
}

#[derive(Args)]
struct OutputArgs {
    /// Report JSON.
    #[arg(long, visible_alias = "report")]
    out: Option<PathBuf>,
    /// Per-event CSV.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Metrics CSV, one row per sample.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    decisions_log: Option<PathBuf>,
    /// Also write a comparison table (and window series for chart-data).
    #[arg(long)]
    emit: Option<EmitFormat>,
    #[arg(long, default_value = ".")]
    emit_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "rule")]
    policy: PolicyKind,
    /// Shorthand for `--policy no-averaging`.
    #[arg(long)]
    no_averaging: bool,
    /// Session length in seconds (defaults to the trace length).
    #[arg(long)]
    duration: Option<f64>,
    /// Live mode: `http(s)://` URL or `host:port` of a TCP echo service.
    #[arg(long)]
    latency_target: Option<String>,
    #[arg(long, default_value_t = 2000)]
    latency_timeout_ms: u64,
    /// Live mode: interface to count (all but loopback by default).
    #[arg(long)]
    interface: Option<String>,
    #[command(flatten)]
    control: ControlArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "rule,advisor,no-averaging"
    )]
    policies: Vec<PolicyKind>,
    #[arg(long)]
    duration: Option<f64>,
    /// Comparison table CSV.
    #[arg(long)]
    out: PathBuf,
    /// `chart-data` also writes `<policy>_windows.csv` next to the table.
    #[arg(long, default_value = "table")]
    emit: EmitFormat,
    #[command(flatten)]
    control: ControlArgs,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, default_value_t = 1.0)]
    interval: f64,
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long)]
    latency_target: Option<String>,
    #[arg(long, default_value_t = 2000)]
    latency_timeout_ms: u64,
    #[arg(long)]
    interface: Option<String>,
    #[arg(long)]
    log: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Metrics CSV written by `run` or `probe`.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value = "rule")]
    policy: PolicyKind,
    #[arg(long)]
    no_averaging: bool,
    #[arg(long)]
    duration: Option<f64>,
    #[command(flatten)]
    control: ControlArgs,
    #[arg(long, visible_alias = "report")]
    out: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    decisions_log: Option<PathBuf>,
}

#[derive(Args)]
struct MockArgs {
    /// Fixture JSON (the bundled table when omitted).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    bind: String,
    /// normal, delay:<ms>, drop or malformed.
    #[arg(long, default_value = "normal")]
    behavior: Behavior,
}

fn parse_override(s: &str) -> Result<UserOverride, String> {
    let (t, label) = s.split_once(':').ok_or("expected <t_s>:<label>")?;
    let t_s: f64 = t.parse().map_err(|_| format!("bad time {t:?}"))?;
    if !(t_s.is_finite() && t_s >= 0.0) || label.is_empty() {
        return Err(format!("bad override {s:?}"));
    }
    Ok(UserOverride {
        t_s,
        label: label.to_string(),
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("abr-lab: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Probe(a) => probe(a),
        Command::Replay(a) => replay(a),
        Command::MockAdvisor(a) => mock(a),
    }
}

fn session_config(
    control: &ControlArgs,
    policy: PolicyKind,
    duration: f64,
) -> Result<SessionConfig> {
    let mut cfg = SessionConfig {
        policy,
        window_s: control.window,
        fluct_threshold: control.fluct_threshold,
        segment_duration_s: control.segment,
        startup_threshold_s: control.startup,
        advisor_url: control.advisor_url.clone(),
        advisor_timeout_ms: control.advisor_timeout_ms,
        overrides: control.overrides.clone(),
        ..SessionConfig::new(duration)
    };
    cfg.probe.interval_s = control.interval;
    if let Some(path) = &control.ladder {
        cfg.rule.ladder = BitrateLadder::from_csv_path(path)
            .with_context(|| format!("reading ladder {}", path.display()))?;
    }
    Ok(cfg)
}

/// Starts the bundled mock when the advisor policy has nowhere to go.
fn ensure_advisor(cfg: &mut SessionConfig) -> Result<Option<MockAdvisorHandle>> {
    if cfg.policy != PolicyKind::Advisor || cfg.advisor_url.is_some() {
        return Ok(None);
    }
    let handle = mock_advisor::serve("127.0.0.1:0", FixtureTable::bundled(), Behavior::Normal)?;
    info!(
        "no --advisor-url given; using bundled mock at {}",
        handle.url()
    );
    cfg.advisor_url = Some(handle.url());
    Ok(Some(handle))
}

fn load_trace(path: &Path) -> Result<Trace> {
    Trace::from_csv_path(path).with_context(|| format!("reading trace {}", path.display()))
}

fn open_sink(path: &Option<PathBuf>) -> Result<Option<Box<dyn Write + Send>>> {
    path.as_ref()
        .map(|p| -> Result<Box<dyn Write + Send>> {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(f))
        })
        .transpose()
}

fn round_trip(target: &Option<String>) -> Result<Option<Box<dyn RoundTripSource + Send>>> {
    let Some(target) = target else {
        return Ok(None);
    };
    if target.starts_with("http://") || target.starts_with("https://") {
        return Ok(Some(Box::new(HttpRoundTrip {
            url: target.clone(),
        })));
    }
    let addr = target
        .to_socket_addrs()
        .with_context(|| format!("resolving latency target {target}"))?
        .next()
        .with_context(|| format!("latency target {target} has no address"))?;
    Ok(Some(Box::new(TcpEchoRoundTrip { addr })))
}

fn write_outputs(
    report: &SessionReport,
    name: &str,
    out: &Option<PathBuf>,
    events: &Option<PathBuf>,
) -> Result<()> {
    if let Some(p) = out {
        write_report_json(report, create_file(p)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = events {
        write_events(report, create_file(p)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    let qoe = compute_qoe(report, &QoeWeights::default());
    println!(
        "{name}: stalls={} stall_s={:.2} switches={} avg_height={:.1} decisions={} qoe={:.4}",
        report.stall_count,
        report.total_stall_s,
        report.switch_count,
        report.time_weighted_avg_height,
        report.decisions.len(),
        qoe
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let policy = if a.no_averaging {
        PolicyKind::NoAveraging
    } else {
        a.policy
    };
    let (source, duration) = match &a.trace {
        Some(path) => {
            let trace = load_trace(path)?;
            let d = a.duration.unwrap_or(trace.duration_s());
            (Source::Trace(trace), d)
        }
        None => {
            let d = a.duration.context("live runs need --duration")?;
            let cfg = ProbeConfig {
                interval_s: a.control.interval,
                latency_timeout_ms: a.latency_timeout_ms,
            };
            let counters: Box<dyn CounterSource + Send> =
                Box::new(ProcNetDev::new(a.interface.clone()));
            (
                Source::Live(LiveProbe::new(
                    counters,
                    round_trip(&a.latency_target)?,
                    cfg,
                )),
                d,
            )
        }
    };
    let mut cfg = session_config(&a.control, policy, duration)?;
    cfg.probe.latency_timeout_ms = a.latency_timeout_ms;
    let _mock = ensure_advisor(&mut cfg)?;
    let sinks = Sinks {
        metrics: open_sink(&a.output.log)?,
        decisions: open_sink(&a.output.decisions_log)?,
    };
    let report = run_session(source, &cfg, None, sinks)?;
    let name = cfg.policy.name();
    write_outputs(&report, &name, &a.output.out, &a.output.events)?;
    if let Some(format) = a.output.emit {
        emit_report(
            &[(name, report)],
            format,
            &a.output.emit_dir,
            &QoeWeights::default(),
        )?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    if a.policies.is_empty() {
        bail!("no policies given");
    }
    let trace = load_trace(&a.trace)?;
    let duration = a.duration.unwrap_or(trace.duration_s());
    let weights = QoeWeights::default();
    let mut rows = Vec::new();
    let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    for policy in &a.policies {
        let mut cfg = session_config(&a.control, policy.clone(), duration)?;
        let _mock = ensure_advisor(&mut cfg)?;
        let report = run_session(Source::Trace(trace.clone()), &cfg, None, Sinks::default())
            .with_context(|| format!("policy {}", policy.name()))?;
        let row = ComparisonRow::from_report(&policy.name(), &report, &weights);
        println!(
            "{}: stalls={} stall_s={:.2} switches={} avg_height={:.1} qoe={:.4}",
            row.policy,
            row.stall_count,
            row.total_stall_s,
            row.switch_count,
            row.avg_height,
            row.qoe
        );
        if a.emit == EmitFormat::ChartData {
            let safe: String = row
                .policy
                .chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || c == '-' {
                        c
                    } else {
                        '_'
                    }
                })
                .collect();
            let path = dir.join(format!("{safe}_windows.csv"));
            write_window_series(&report.windows, &report.decisions, create_file(&path)?)?;
        }
        rows.push(row);
    }
    write_comparison(&rows, create_file(&a.out)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    if !(a.duration.is_finite() && a.duration > 0.0) {
        bail!("--duration must be positive");
    }
    let cfg = ProbeConfig {
        interval_s: a.interval,
        latency_timeout_ms: a.latency_timeout_ms,
    };
    let mut probe = LiveProbe::new(
        ProcNetDev::new(a.interface),
        round_trip(&a.latency_target)?,
        cfg,
    );
    let mut log = SampleLog::new(create_file(&a.log)?)?;
    let interval = Duration::from_secs_f64(a.interval);
    let started = std::time::Instant::now();
    probe.start()?;
    let mut tick = started;
    let mut t0 = None;
    while started.elapsed().as_secs_f64() < a.duration {
        tick += interval;
        if let Some(wait) = tick.checked_duration_since(std::time::Instant::now()) {
            std::thread::sleep(wait);
        }
        let Some(mut s) = probe.sample()? else {
            continue;
        };
        s.timestamp_s -= *t0.get_or_insert(s.timestamp_s);
        log.log_sample(&s)?;
        match s.latency_ms {
            Some(l) => info!(
                "t={:.2} in={:.2} Kbps out={:.2} Kbps latency={l:.2} ms",
                s.timestamp_s, s.kbps_in, s.kbps_out
            ),
            None => info!(
                "t={:.2} in={:.2} Kbps out={:.2} Kbps latency=n/a",
                s.timestamp_s, s.kbps_in, s.kbps_out
            ),
        }
    }
    log.close()?;
    println!("{} samples written to {}", log.rows(), a.log.display());
    Ok(())
}

fn replay(a: ReplayArgs) -> Result<()> {
    let file = File::open(&a.log).with_context(|| format!("opening {}", a.log.display()))?;
    let samples = read_samples(file).with_context(|| format!("reading {}", a.log.display()))?;
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) => (f.timestamp_s, l.timestamp_s),
        _ => bail!("{} has no samples", a.log.display()),
    };
    let duration = a.duration.unwrap_or(last - first + a.control.interval);
    let policy = if a.no_averaging {
        PolicyKind::NoAveraging
    } else {
        a.policy
    };
    let mut cfg = session_config(&a.control, policy, duration)?;
    let _mock = ensure_advisor(&mut cfg)?;
    let sinks = Sinks {
        metrics: None,
        decisions: open_sink(&a.decisions_log)?,
    };
    let report = run_session(Source::Samples(samples), &cfg, None, sinks)?;
    write_outputs(&report, &cfg.policy.name(), &a.out, &a.events)
}

fn mock(a: MockArgs) -> Result<()> {
    let table = match &a.fixtures {
        Some(p) => FixtureTable::from_path(p)
            .with_context(|| format!("reading fixtures {}", p.display()))?,
        None => FixtureTable::bundled(),
    };
    let handle = mock_advisor::serve(&format!("{}:{}", a.bind, a.port), table, a.behavior)?;
    println!("mock advisor listening on {}", handle.url());
    std::io::stdout().flush().ok();
    loop {
        std::thread::park();
    }
}
