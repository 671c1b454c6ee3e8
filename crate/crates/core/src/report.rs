//! Fairness statistics and CSV output.
//!
//! All accuracies are in percent.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FairnessStats {
    pub average: f64,
    /// Mean of the best `ceil(N/10)` clients.
    pub best10: f64,
    /// Mean of the worst `ceil(N/10)` clients.
    pub worst10: f64,
    /// Population variance, percent².
    pub variance: f64,
}

/// Per-round metrics of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// Accuracy on the pooled test set.
    pub sample_accuracy: f64,
    pub per_client_accuracy: Vec<f64>,
    pub fairness: FairnessStats,
    pub personalized_accuracy: Option<f64>,
    pub global_accuracy_pfedme: Option<f64>,
    pub sim_time: Option<f64>,
}

pub fn fairness_stats(per_client: &[f64]) -> Result<FairnessStats> {
    if per_client.is_empty() {
        return Err(Error::Empty("per-client accuracies"));
    }
    let n = per_client.len();
    let mut sorted = per_client.to_vec();
    sorted.sort_by(f64::total_cmp);
    let decile = n.div_ceil(10);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let average = mean(&sorted);
    let variance = sorted.iter().map(|a| (a - average) * (a - average)).sum::<f64>() / n as f64;
    Ok(FairnessStats {
        average,
        best10: mean(&sorted[n - decile..]),
        worst10: mean(&sorted[..decile]),
        variance,
    })
}

pub const CSV_HEADER: &str =
    "round,sample_acc,avg_client_acc,best10,worst10,variance,personalized_acc,global_acc,sim_time";

fn fixed(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fixed).unwrap_or_default()
}

/// The exact bytes [`emit_csv`] writes.
pub fn render_csv(records: &[RoundRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            fixed(r.sample_accuracy),
            fixed(r.fairness.average),
            fixed(r.fairness.best10),
            fixed(r.fairness.worst10),
            fixed(r.fairness.variance),
            opt(r.personalized_accuracy),
            opt(r.global_accuracy_pfedme),
            opt(r.sim_time),
        );
    }
    out
}

/// Write `contents` to a sibling temp file, then rename it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, contents).map_err(|e| Error::io(path, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn emit_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    write_atomic(path, &render_csv(records))
}

/// One parsed row of a per-round CSV.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub sample_acc: f64,
    pub avg_client_acc: f64,
    pub best10: f64,
    pub worst10: f64,
    pub variance: f64,
    pub personalized_acc: Option<f64>,
    pub global_acc: Option<f64>,
    pub sim_time: Option<f64>,
}

pub fn parse_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    if reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .collect::<Vec<_>>()
        .join(",")
        != CSV_HEADER
    {
        return Err(Error::InvalidArgument(format!("{}: unexpected header", path.display())));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<CsvRow>, _>>()
        .map_err(|e| Error::csv(path, e))
}

/// Final-round numbers of one run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalSummary {
    pub fairness: FairnessStats,
    pub sample_accuracy: f64,
    pub personalized_accuracy: Option<f64>,
    pub global_accuracy_pfedme: Option<f64>,
}

/// Stats of the last record, or `None` for an empty run.
pub fn summarize_final(records: &[RoundRecord]) -> Option<FinalSummary> {
    records.last().map(|r| FinalSummary {
        fairness: r.fairness,
        sample_accuracy: r.sample_accuracy,
        personalized_accuracy: r.personalized_accuracy,
        global_accuracy_pfedme: r.global_accuracy_pfedme,
    })
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub algorithm: String,
    pub dataset: String,
    pub eligible_ratio: f64,
    pub loss_ratio: f64,
    pub seed: u64,
    /// `Err` carries the failure message of a cell that did not finish.
    pub outcome: std::result::Result<FinalSummary, String>,
}

pub const SUMMARY_HEADER: &str = "algorithm,dataset,eligible_ratio,loss_ratio,average,best10,worst10,variance,sample_acc,personalized_acc,global_acc,seed,status";

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        let (stats, status) = match &row.outcome {
            Ok(s) => (
                format!(
                    "{},{},{},{},{},{},{}",
                    fixed(s.fairness.average),
                    fixed(s.fairness.best10),
                    fixed(s.fairness.worst10),
                    fixed(s.fairness.variance),
                    fixed(s.sample_accuracy),
                    opt(s.personalized_accuracy),
                    opt(s.global_accuracy_pfedme),
                ),
                "ok".to_string(),
            ),
            Err(msg) => (",,,,,,".to_string(), format!("\"error: {}\"", msg.replace('"', "'"))),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.algorithm, row.dataset, row.eligible_ratio, row.loss_ratio, stats, row.seed, status
        );
    }
    out
}
