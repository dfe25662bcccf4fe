//! Turn a report directory into plot-ready two-column CSV series under
//! `<report>/plots/`. Numeric fields are copied through as written, so
//! the series inherit the report's byte-level determinism.
//!
//! Sources and the series they yield:
//!   bowen_counts.csv   -> decay_theta{id}.csv   (n, ball_measure)
//!   spectrum_trace.csv -> trace_{top,neutral,bottom}.csv (t, exponent)
//!   bounds.json        -> bound_margins.csv     (bound_index, worst_margin)
//!
//! A report with none of these sources yields no series; a source with
//! no data rows yields its header-only file.

use std::path::{Path, PathBuf};

use anosovlab::report::{write_csv, write_manifest, MANIFEST_NAME};
use anosovlab::splitting::BoundsReport;

pub const DECAY_HEADER: &str = "n,ball_measure";
pub const TRACE_HEADER: &str = "t,exponent";
pub const MARGIN_HEADER: &str = "bound_index,worst_margin";

/// Missing or unreadable report input; the caller maps this to the
/// schema exit status.
#[derive(Debug)]
pub struct ReportError(pub String);

impl std::fmt::Display for ReportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub enum PlotError {
    Report(ReportError),
    Run(anosovlab::Error),
}

impl From<anosovlab::Error> for PlotError {
    fn from(e: anosovlab::Error) -> Self {
        PlotError::Run(e)
    }
}

fn bad(msg: String) -> PlotError {
    PlotError::Report(ReportError(msg))
}

/// Split a CSV line into exactly `n` fields.
fn fields(line: &str, n: usize, path: &Path, lineno: usize) -> Result<Vec<String>, PlotError> {
    let parts: Vec<String> = line.split(',').map(str::to_string).collect();
    if parts.len() != n {
        return Err(bad(format!(
            "{}:{}: expected {} comma-separated fields, found {}",
            path.display(),
            lineno,
            n,
            parts.len()
        )));
    }
    Ok(parts)
}

fn emit_decay(report: &Path, plots: &Path, written: &mut Vec<PathBuf>) -> Result<(), PlotError> {
    let src = report.join("bowen_counts.csv");
    let Ok(text) = std::fs::read_to_string(&src) else {
        return Ok(());
    };
    // group rows by theta_id in first-appearance order
    let mut order: Vec<String> = Vec::new();
    let mut series: Vec<Vec<String>> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f = fields(line, 6, &src, i + 1)?;
        let idx = match order.iter().position(|id| *id == f[0]) {
            Some(k) => k,
            None => {
                order.push(f[0].clone());
                series.push(Vec::new());
                order.len() - 1
            }
        };
        series[idx].push(format!("{},{}", f[1], f[5]));
    }
    if order.is_empty() {
        let path = plots.join("decay_theta0.csv");
        write_csv(&path, DECAY_HEADER, &[])?;
        written.push(path);
        return Ok(());
    }
    for (id, rows) in order.iter().zip(&series) {
        let path = plots.join(format!("decay_theta{id}.csv"));
        write_csv(&path, DECAY_HEADER, rows)?;
        written.push(path);
    }
    Ok(())
}

fn emit_traces(report: &Path, plots: &Path, written: &mut Vec<PathBuf>) -> Result<(), PlotError> {
    let src = report.join("spectrum_trace.csv");
    let Ok(text) = std::fs::read_to_string(&src) else {
        return Ok(());
    };
    // one trace figure per exponent, from the first state's checkpoints
    let mut first_id: Option<String> = None;
    let mut cols: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f = fields(line, 5, &src, i + 1)?;
        let id = first_id.get_or_insert_with(|| f[0].clone());
        if f[0] != *id {
            continue;
        }
        for k in 0..3 {
            cols[k].push(format!("{},{}", f[1], f[2 + k]));
        }
    }
    for (name, rows) in ["trace_top", "trace_neutral", "trace_bottom"].iter().zip(&cols) {
        let path = plots.join(format!("{name}.csv"));
        write_csv(&path, TRACE_HEADER, rows)?;
        written.push(path);
    }
    Ok(())
}

fn emit_margins(report: &Path, plots: &Path, written: &mut Vec<PathBuf>) -> Result<(), PlotError> {
    let src = report.join("bounds.json");
    let Ok(text) = std::fs::read_to_string(&src) else {
        return Ok(());
    };
    let parsed: BoundsReport = serde_json::from_str(&text)
        .map_err(|e| bad(format!("{}: not a bound report: {e}", src.display())))?;
    let rows: Vec<String> = parsed
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{},{:.17e}", i, r.worst_margin))
        .collect();
    let path = plots.join("bound_margins.csv");
    write_csv(&path, MARGIN_HEADER, &rows)?;
    written.push(path);
    Ok(())
}

/// Write every series the report supports and refresh the manifest so it
/// keeps covering the whole directory.
pub fn emit_plots(report: &Path) -> Result<Vec<PathBuf>, PlotError> {
    if !report.join(MANIFEST_NAME).is_file() {
        return Err(bad(format!(
            "{}: no report here (missing {MANIFEST_NAME})",
            report.display()
        )));
    }
    let plots = report.join("plots");
    std::fs::create_dir_all(&plots).map_err(anosovlab::Error::from)?;
    let mut written = Vec::new();
    emit_decay(report, &plots, &mut written)?;
    emit_traces(report, &plots, &mut written)?;
    emit_margins(report, &plots, &mut written)?;
    write_manifest(report).map_err(PlotError::Run)?;
    Ok(written)
}
