//! Metrics history as CSV and run summaries as JSON.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{LossMode, MetricsRecord};
use crate::error::{Error, Result};

fn csv_err(source_name: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        source_name: source_name.to_string(),
        line,
        message: e.to_string(),
    }
}

/// Writes the history with a header row. Floats use the shortest
/// round-tripping representation, so equal histories give equal bytes.
pub fn write_metrics_csv<W: Write>(history: &[MetricsRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if history.is_empty() {
        // header only
        out.write_record(METRICS_COLUMNS).map_err(|e| csv_err("metrics", e))?;
    }
    for rec in history {
        out.serialize(rec).map_err(|e| csv_err("metrics", e))?;
    }
    out.flush().map_err(|e| Error::invalid(format!("metrics: {e}")))
}

pub fn read_metrics_csv<R: Read>(r: R, source_name: &str) -> Result<Vec<MetricsRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| csv_err(source_name, e)))
        .collect()
}

pub const METRICS_COLUMNS: [&str; 11] = [
    "iteration",
    "lr",
    "total_loss",
    "softmax_loss",
    "aux_loss",
    "intra_loss",
    "inter_loss",
    "batch_min_center_sq",
    "mean_intra_range",
    "min_center_sq",
    "verification_accuracy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped on a non-finite loss; the metrics file is partial.
    Aborted,
}

/// Per-variant `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub loss: LossMode,
    pub tail_ratio: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub iterations_completed: u64,
    pub margin: f64,
    pub train_identities: usize,
    pub train_samples: usize,
    pub final_metrics: Option<MetricsRecord>,
    pub wall_time_secs: f64,
}

pub fn write_summary_json<W: Write>(summary: &RunSummary, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, summary).map_err(|e| Error::invalid(format!("summary: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: u64) -> MetricsRecord {
        MetricsRecord {
            iteration: i,
            lr: 0.1,
            total_loss: 1.0 / 3.0,
            softmax_loss: 0.25,
            aux_loss: 1e-17,
            intra_loss: 2.0,
            inter_loss: 0.0,
            batch_min_center_sq: f64::INFINITY,
            mean_intra_range: 4.5,
            min_center_sq: 7.25,
            verification_accuracy: 0.875,
        }
    }

    #[test]
    fn csv_round_trip() {
        let h = vec![rec(10), rec(20)];
        let mut buf = Vec::new();
        write_metrics_csv(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(read_metrics_csv(buf.as_slice(), "mem").unwrap(), h);
    }

    #[test]
    fn empty_history_writes_header() {
        let mut buf = Vec::new();
        write_metrics_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), METRICS_COLUMNS.join(","));
    }
}
