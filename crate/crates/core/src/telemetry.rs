//! CSV logs for samples and decisions, report files, and comparison
//! tables.
//!
//! Log rows use two decimal places and `.` as the separator, flushed one
//! row at a time so a crash loses at most the row being written.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Decision, DecisionSource, NetworkSample, Reason, WindowStats};
use crate::sim::{compute_qoe, QoeWeights, SessionReport, SimEventKind};

pub const METRICS_HEADER: &str = "t_s,latency_ms,kbps_in,kbps_out";
pub const DECISIONS_HEADER: &str = "t_s,source,resolution,buffer_bytes,reason";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("decision log row {row}: {what}")]
    BadDecisionRow { row: usize, what: String },
    #[error("nothing to emit")]
    NoReports,
}

fn closed() -> TelemetryError {
    TelemetryError::Io(io::Error::new(
        io::ErrorKind::BrokenPipe,
        "log sink is closed",
    ))
}

/// Line-oriented CSV sink with a fixed header.
pub struct CsvSink<W: Write> {
    out: Option<W>,
    rows: usize,
}

impl<W: Write> CsvSink<W> {
    fn open(mut out: W, header: &str) -> Result<Self, TelemetryError> {
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self {
            out: Some(out),
            rows: 0,
        })
    }

    fn append(&mut self, line: &str) -> Result<(), TelemetryError> {
        let out = self.out.as_mut().ok_or_else(closed)?;
        writeln!(out, "{line}")?;
        out.flush()?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn close(&mut self) -> Result<(), TelemetryError> {
        if let Some(mut out) = self.out.take() {
            out.flush()?;
        }
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.out.is_none()
    }
}

pub fn format_sample(s: &NetworkSample) -> String {
    let latency = s.latency_ms.map(|l| format!("{l:.2}")).unwrap_or_default();
    format!(
        "{:.2},{latency},{:.2},{:.2}",
        s.timestamp_s, s.kbps_in, s.kbps_out
    )
}

pub fn format_decision(d: &Decision) -> String {
    format!(
        "{:.2},{},{},{},{}",
        d.decided_at_s, d.source, d.config.resolution.label, d.config.buffer_target_bytes, d.reason
    )
}

/// `t_s,latency_ms,kbps_in,kbps_out` log.
pub struct SampleLog<W: Write>(CsvSink<W>);

impl<W: Write> SampleLog<W> {
    pub fn new(out: W) -> Result<Self, TelemetryError> {
        CsvSink::open(out, METRICS_HEADER).map(Self)
    }

    pub fn log_sample(&mut self, s: &NetworkSample) -> Result<(), TelemetryError> {
        self.0.append(&format_sample(s))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn close(&mut self) -> Result<(), TelemetryError> {
        self.0.close()
    }
}

/// `t_s,source,resolution,buffer_bytes,reason` log.
pub struct DecisionLog<W: Write>(CsvSink<W>);

impl<W: Write> DecisionLog<W> {
    pub fn new(out: W) -> Result<Self, TelemetryError> {
        CsvSink::open(out, DECISIONS_HEADER).map(Self)
    }

    pub fn log_decision(&mut self, d: &Decision) -> Result<(), TelemetryError> {
        self.0.append(&format_decision(d))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn close(&mut self) -> Result<(), TelemetryError> {
        self.0.close()
    }
}

pub fn create_file(path: impl AsRef<Path>) -> Result<BufWriter<File>, TelemetryError> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Deserialize)]
struct MetricsRow {
    t_s: f64,
    latency_ms: Option<f64>,
    kbps_in: f64,
    kbps_out: f64,
}

/// Reads a metrics log back into samples; an empty latency cell is a
/// failed probe.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<NetworkSample>, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    rdr.deserialize()
        .map(|row| {
            let row: MetricsRow = row?;
            Ok(NetworkSample {
                timestamp_s: row.t_s,
                kbps_in: row.kbps_in,
                kbps_out: row.kbps_out,
                latency_ms: row.latency_ms,
            })
        })
        .collect()
}

/// One parsed decision-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRow {
    pub t_s: f64,
    pub source: DecisionSource,
    pub resolution: String,
    pub buffer_bytes: u64,
    pub reason: Reason,
}

pub fn read_decisions<R: Read>(reader: R) -> Result<Vec<DecisionRow>, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| TelemetryError::BadDecisionRow {
            row,
            what: what.to_string(),
        };
        if rec.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        rows.push(DecisionRow {
            t_s: rec[0].parse().map_err(|_| bad("t_s"))?,
            source: DecisionSource::parse(&rec[1]).ok_or_else(|| bad("source"))?,
            resolution: rec[2].to_string(),
            buffer_bytes: rec[3].parse().map_err(|_| bad("buffer_bytes"))?,
            reason: Reason::parse(&rec[4]).ok_or_else(|| bad("reason"))?,
        });
    }
    Ok(rows)
}

/// One row of a policy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub stall_count: usize,
    pub total_stall_s: f64,
    pub rebuffer_ratio: f64,
    pub switch_count: usize,
    pub avg_height: f64,
    pub qoe: f64,
}

impl ComparisonRow {
    pub fn from_report(policy: &str, report: &SessionReport, weights: &QoeWeights) -> Self {
        Self {
            policy: policy.to_string(),
            stall_count: report.stall_count,
            total_stall_s: report.total_stall_s,
            rebuffer_ratio: report.rebuffer_ratio,
            switch_count: report.switch_count,
            avg_height: report.time_weighted_avg_height,
            qoe: compute_qoe(report, weights),
        }
    }
}

/// Comparison table; floats keep full precision so the file parses back
/// to identical values.
pub fn write_comparison<W: Write>(rows: &[ComparisonRow], out: W) -> Result<(), TelemetryError> {
    let mut wtr = csv::Writer::from_writer(out);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_comparison<R: Read>(reader: R) -> Result<Vec<ComparisonRow>, TelemetryError> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Table,
    ChartData,
}

impl std::str::FromStr for EmitFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "chart-data" => Ok(Self::ChartData),
            other => Err(format!(
                "unknown format {other:?} (expected table or chart-data)"
            )),
        }
    }
}

/// Writes `comparison.csv` into `dir` and, for chart data, one
/// `<policy>_windows.csv` time series per report. Returns the files written.
pub fn emit_report(
    reports: &[(String, SessionReport)],
    format: EmitFormat,
    dir: impl AsRef<Path>,
    weights: &QoeWeights,
) -> Result<Vec<PathBuf>, TelemetryError> {
    if reports.is_empty() {
        return Err(TelemetryError::NoReports);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let rows: Vec<_> = reports
        .iter()
        .map(|(name, r)| ComparisonRow::from_report(name, r, weights))
        .collect();
    let table = dir.join("comparison.csv");
    write_comparison(&rows, create_file(&table)?)?;
    let mut written = vec![table];
    if format == EmitFormat::ChartData {
        for (name, report) in reports {
            let path = dir.join(format!("{}_windows.csv", sanitize(name)));
            write_window_series(&report.windows, &report.decisions, create_file(&path)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Per-window series: the window averages next to the decision made at
/// the window's end.
pub fn write_window_series<W: Write>(
    windows: &[WindowStats],
    decisions: &[Decision],
    mut out: W,
) -> Result<(), TelemetryError> {
    writeln!(out, "window_end_s,avg_kbps_in,avg_latency_ms,samples,resolution,height,buffer_bytes,source,reason")?;
    let mut pending = decisions
        .iter()
        .filter(|d| d.source != DecisionSource::UserOverride || d.reason != Reason::UserOverride)
        .peekable();
    for w in windows {
        let latency = w
            .avg_latency_ms
            .map(|l| format!("{l:.2}"))
            .unwrap_or_default();
        let decision = pending.next_if(|d| d.decided_at_s == w.window_end_s);
        let (res, height, bytes, source, reason) = match decision {
            Some(d) => (
                d.config.resolution.label.as_str(),
                d.config.resolution.height.to_string(),
                d.config.buffer_target_bytes.to_string(),
                d.source.as_str(),
                d.reason.as_str(),
            ),
            None => ("", String::new(), String::new(), "", ""),
        };
        writeln!(
            out,
            "{:.2},{:.2},{latency},{},{res},{height},{bytes},{source},{reason}",
            w.window_end_s, w.avg_kbps_in, w.sample_count
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Per-event playback log: `t_s,buffer_s,event,detail`.
pub fn write_events<W: Write>(report: &SessionReport, mut out: W) -> Result<(), TelemetryError> {
    writeln!(out, "t_s,buffer_s,event,detail")?;
    for e in &report.events {
        let (name, detail) = match &e.kind {
            SimEventKind::PlaybackStart => ("playback-start", String::new()),
            SimEventKind::StallStart => ("stall-start", String::new()),
            SimEventKind::StallEnd => ("stall-end", String::new()),
            SimEventKind::SegmentComplete {
                resolution, bytes, ..
            } => ("segment-complete", format!("{resolution}:{bytes}")),
            SimEventKind::DecisionApplied { index } => ("decision-applied", index.to_string()),
            SimEventKind::DecisionSuperseded { index } => {
                ("decision-superseded", index.to_string())
            }
            SimEventKind::Switch { from, to } => ("switch", format!("{from}->{to}")),
            SimEventKind::FetchPause => ("fetch-pause", String::new()),
            SimEventKind::FetchResume => ("fetch-resume", String::new()),
        };
        writeln!(out, "{:.3},{:.3},{name},{detail}", e.t_s, e.buffer_s)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_json<W: Write>(report: &SessionReport, out: W) -> Result<(), TelemetryError> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}
