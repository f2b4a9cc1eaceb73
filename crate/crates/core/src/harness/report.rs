//! Metrics and report serialization.

use std::io::{Read, Write};

use thiserror::Error;

use crate::countermeasure::CountermeasureKind;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("baseline cycle count must be positive, got {0}")]
    ZeroBaseline(f64),
    #[error("slowdown must be positive, got {0}")]
    NonPositiveSlowdown(f64),
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {reason}")]
    Parse { row: usize, reason: String },
}

pub fn slowdown(c_variant: f64, c_baseline: f64) -> Result<f64, ReportError> {
    if !(c_baseline > 0.0) {
        return Err(ReportError::ZeroBaseline(c_baseline));
    }
    Ok(c_variant / c_baseline)
}

/// Missing key bytes per unit of slowdown.
pub fn efficiency(m: f64, s: f64) -> Result<f64, ReportError> {
    if !(s > 0.0) {
        return Err(ReportError::NonPositiveSlowdown(s));
    }
    Ok(m / s)
}

pub const BOUNDARY_CAVEAT: &str = "efficiency is 0 because m = 0: every true key byte survived, so the \
     reduced space still contains the key; a wide candidate spread can still make the search infeasible";

pub const HARDWARE_MARKER: &str = "hardware-specific measurement, not an acceptance target";

#[derive(Clone, Debug, PartialEq)]
pub struct EfficiencyReport {
    pub countermeasure: CountermeasureKind,
    /// Missing key bytes, averaged over runs.
    pub m: f64,
    /// Cycles per encryption.
    pub c: f64,
    pub s: f64,
    pub efficiency: f64,
    pub keyspace_log2: Option<f64>,
    pub search_estimate_secs: Option<f64>,
    pub hardware_specific: bool,
}

impl EfficiencyReport {
    pub fn new(countermeasure: CountermeasureKind, m: f64, c: f64, s: f64) -> Result<Self, ReportError> {
        Ok(Self {
            countermeasure,
            m,
            c,
            s,
            efficiency: efficiency(m, s)?,
            keyspace_log2: None,
            search_estimate_secs: None,
            hardware_specific: false,
        })
    }

    pub fn caveat(&self) -> Option<&'static str> {
        (self.m == 0.0).then_some(BOUNDARY_CAVEAT)
    }
}

/// Reference unprotected encryption cost on the 733 MHz server, cycles.
pub const BASELINE_CYCLES: f64 = 5062.0;

/// Reference rows: (countermeasure, m, c, s).
pub const REFERENCE_ROWS: [(CountermeasureKind, f64, f64, f64); 4] = [
    (CountermeasureKind::RandomLoop, 7.0, 9303.0, 1.84),
    (CountermeasureKind::SpecifiedLoop, 8.0, 5599.0, 1.11),
    (CountermeasureKind::Prefetch, 10.0, 5649.0, 1.12),
    (CountermeasureKind::CachePartition, 14.0, 3015.0, 0.60),
];

pub fn reference_reports() -> Vec<EfficiencyReport> {
    REFERENCE_ROWS
        .iter()
        .map(|&(k, m, c, s)| EfficiencyReport::new(k, m, c, s).expect("reference slowdowns are positive"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    PlotData,
}

impl std::str::FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::PlotData),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["countermeasure", "m", "c", "s", "efficiency", "keyspace_log2"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn emit_report<W: Write>(reports: &[EfficiencyReport], format: ReportFormat, mut w: W) -> Result<(), ReportError> {
    match format {
        ReportFormat::Csv => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(CSV_HEADER)?;
            for r in reports {
                out.write_record([
                    r.countermeasure.as_str().to_string(),
                    r.m.to_string(),
                    r.c.to_string(),
                    r.s.to_string(),
                    r.efficiency.to_string(),
                    opt(r.keyspace_log2),
                ])?;
            }
            out.flush()?;
        }
        ReportFormat::PlotData => {
            let mut out = csv::Writer::from_writer(w);
            out.write_record(["series", "countermeasure", "value"])?;
            for r in reports {
                out.write_record(["slowdown", r.countermeasure.as_str(), &r.s.to_string()])?;
            }
            for r in reports {
                out.write_record(["missing_bytes", r.countermeasure.as_str(), &r.m.to_string()])?;
            }
            out.flush()?;
        }
        ReportFormat::Table => {
            writeln!(
                w,
                "{:<16} {:>6} {:>10} {:>6} {:>10} {:>14} {:>14}",
                "countermeasure", "m", "c", "s", "efficiency", "log2(keyspace)", "search (s)"
            )?;
            for r in reports {
                writeln!(
                    w,
                    "{:<16} {:>6.2} {:>10.1} {:>6.2} {:>10.2} {:>14} {:>14}",
                    r.countermeasure.as_str(),
                    r.m,
                    r.c,
                    r.s,
                    r.efficiency,
                    r.keyspace_log2.map_or("-".into(), |v| format!("{v:.1}")),
                    r.search_estimate_secs.map_or("-".into(), |v| format!("{v:.3e}")),
                )?;
            }
            for r in reports {
                if let Some(c) = r.caveat() {
                    writeln!(w, "note ({}): {c}", r.countermeasure)?;
                }
            }
            if reports.iter().any(|r| r.hardware_specific) {
                writeln!(w, "WARNING: {HARDWARE_MARKER}")?;
            }
        }
    }
    Ok(())
}

/// Reads rows written by the csv format.
pub fn read_report_csv<R: Read>(r: R) -> Result<Vec<EfficiencyReport>, ReportError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(ReportError::Parse {
            row: 0,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| ReportError::Parse { row: i + 1, reason };
        let num = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(format!("{}: {e}", CSV_HEADER[k])));
        out.push(EfficiencyReport {
            countermeasure: rec[0].parse().map_err(|e| bad(format!("{e}")))?,
            m: num(1)?,
            c: num(2)?,
            s: num(3)?,
            efficiency: num(4)?,
            keyspace_log2: if rec[5].is_empty() { None } else { Some(num(5)?) },
            search_estimate_secs: None,
            hardware_specific: false,
        });
    }
    Ok(out)
}
