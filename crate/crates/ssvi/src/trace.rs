//! Metrics traces (CSV) and their comparison.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

pub const HEADER: [&str; 7] = ["wall_time_s", "epoch", "iteration", "neg_vlb_mc", "test_nll", "error_metric", "notes"];

/// Metric columns, all lower-is-better.
pub const METRICS: [&str; 3] = ["neg_vlb_mc", "test_nll", "error_metric"];

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: columns {found:?} do not match {expected:?}")]
    Columns { path: String, found: Vec<String>, expected: Vec<String> },
    #[error("{path}:{line}: {msg}")]
    Row { path: String, line: u64, msg: String },
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub wall_time_s: f64,
    pub epoch: u64,
    pub iteration: u64,
    pub neg_vlb_mc: Option<f64>,
    pub test_nll: Option<f64>,
    pub error_metric: Option<f64>,
    pub notes: String,
}

impl TraceRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "neg_vlb_mc" => self.neg_vlb_mc,
            "test_nll" => self.test_nll,
            "error_metric" => self.error_metric,
            _ => None,
        }
    }

    /// Leading `key=value` token of the notes, which tags a series.
    pub fn series(&self) -> &str {
        let first = self.notes.split(';').next().unwrap_or("");
        if first.contains('=') {
            first
        } else {
            ""
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows as they are produced, flushing after each.
pub struct TraceWriter {
    w: csv::Writer<File>,
    start: Option<Instant>,
    last_time: f64,
}

impl TraceWriter {
    /// `clock = false` writes 0 for the wall time so traces are reproducible
    /// byte for byte.
    pub fn create(path: &Path, clock: bool) -> Result<Self, TraceError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(HEADER)?;
        w.flush()?;
        Ok(TraceWriter { w, start: clock.then(Instant::now), last_time: 0.0 })
    }

    pub fn elapsed(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }

    pub fn write(&mut self, epoch: u64, iteration: u64, neg_vlb: Option<f64>, test_nll: Option<f64>, error: Option<f64>, notes: &str) -> Result<TraceRow, TraceError> {
        let t = self.elapsed().max(self.last_time);
        self.last_time = t;
        let row = TraceRow { wall_time_s: t, epoch, iteration, neg_vlb_mc: neg_vlb, test_nll, error_metric: error, notes: notes.to_string() };
        self.w.write_record([
            t.to_string(),
            epoch.to_string(),
            iteration.to_string(),
            fmt_opt(neg_vlb),
            fmt_opt(test_nll),
            fmt_opt(error),
            row.notes.clone(),
        ])?;
        self.w.flush()?;
        Ok(row)
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, TraceError> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != HEADER {
        return Err(TraceError::Columns { path: name, found: headers, expected: HEADER.iter().map(|s| s.to_string()).collect() });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| TraceError::Row { path: name.clone(), line, msg };
        let num = |i: usize| -> Result<Option<f64>, TraceError> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number {s:?} in {}", HEADER[i])))
            }
        };
        let int = |i: usize| rec[i].parse::<u64>().map_err(|_| bad(format!("bad integer in {}", HEADER[i])));
        rows.push(TraceRow {
            wall_time_s: num(0)?.unwrap_or(0.0),
            epoch: int(1)?,
            iteration: int(2)?,
            neg_vlb_mc: num(3)?,
            test_nll: num(4)?,
            error_metric: num(5)?,
            notes: rec[6].to_string(),
        });
    }
    Ok(rows)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryLine {
    pub trace: String,
    pub series: String,
    pub metric: &'static str,
    pub final_value: Option<f64>,
    /// Final value minus the first trace's final value for the same series.
    pub diff_vs_first: Option<f64>,
    /// First `(iteration, wall time)` at or below the threshold.
    pub reached: Option<(u64, f64)>,
}

/// Per-series final metrics and time-to-threshold. `thresholds` pairs a
/// metric column with a target value.
pub fn compare(traces: &[(String, Vec<TraceRow>)], thresholds: &[(String, f64)]) -> Result<Vec<SummaryLine>, TraceError> {
    for (metric, _) in thresholds {
        if !METRICS.contains(&metric.as_str()) {
            return Err(TraceError::Usage(format!("unknown metric column `{metric}`")));
        }
    }
    let mut out = Vec::new();
    let mut firsts: Vec<(String, &'static str, Option<f64>)> = Vec::new();
    for (t, (name, rows)) in traces.iter().enumerate() {
        let mut series: Vec<&str> = Vec::new();
        for r in rows {
            if !series.contains(&r.series()) {
                series.push(r.series());
            }
        }
        for s in series {
            let rows: Vec<&TraceRow> = rows.iter().filter(|r| r.series() == s).collect();
            for metric in METRICS {
                let final_value = rows.iter().rev().find_map(|r| r.metric(metric));
                if t == 0 {
                    firsts.push((s.to_string(), metric, final_value));
                }
                let base = firsts.iter().find(|f| f.0 == s && f.1 == metric).and_then(|f| f.2);
                let reached = thresholds
                    .iter()
                    .find(|(m, _)| m == metric)
                    .and_then(|&(_, th)| rows.iter().find(|r| r.metric(metric).is_some_and(|v| v <= th)))
                    .map(|r| (r.iteration, r.wall_time_s));
                out.push(SummaryLine {
                    trace: name.clone(),
                    series: s.to_string(),
                    metric,
                    final_value,
                    diff_vs_first: final_value.zip(base).map(|(a, b)| a - b),
                    reached,
                });
            }
        }
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn render_text(lines: &[SummaryLine]) -> String {
    let mut s = format!("{:<28} {:<18} {:<13} {:>14} {:>14} {:>22}\n", "trace", "series", "metric", "final", "diff_vs_first", "threshold_at(iter,s)");
    for l in lines {
        let reached = l.reached.map_or_else(|| "n/a".to_string(), |(i, t)| format!("{i},{t:.3}"));
        s.push_str(&format!(
            "{:<28} {:<18} {:<13} {:>14} {:>14} {:>22}\n",
            l.trace,
            if l.series.is_empty() { "-" } else { &l.series },
            l.metric,
            cell(l.final_value),
            cell(l.diff_vs_first),
            reached
        ));
    }
    s
}

pub fn write_summary_csv<W: Write>(w: W, lines: &[SummaryLine]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["trace", "series", "metric", "final", "diff_vs_first", "threshold_iteration", "threshold_wall_time_s"])?;
    for l in lines {
        w.write_record([
            l.trace.clone(),
            l.series.clone(),
            l.metric.to_string(),
            fmt_opt(l.final_value),
            fmt_opt(l.diff_vs_first),
            l.reached.map_or_else(|| "n/a".into(), |r| r.0.to_string()),
            l.reached.map_or_else(|| "n/a".into(), |r| r.1.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
