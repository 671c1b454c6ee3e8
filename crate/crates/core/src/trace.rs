//! Per-user network trace analysis: packet-loss and upload-speed CDFs and the
//! eligible ratio induced by an upload-speed threshold.
//!
//! Input is a CSV with one row per measurement. Column names are configurable
//! through [`ColumnMap`]; rows for the same user are averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::write_atomic;

#[derive(Clone, Debug, PartialEq)]
pub struct UserNetRecord {
    pub user_id: String,
    /// Mean over the user's rows.
    pub received_packets: f64,
    pub lost_packets: f64,
    pub throughput_mbps: f64,
    pub loss_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub user_id: String,
    pub received: String,
    pub lost: String,
    pub throughput: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            user_id: "user_id".into(),
            received: "received".into(),
            lost: "lost".into(),
            throughput: "throughput_mbps".into(),
        }
    }
}

/// How a user's rows combine into one loss ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossAggregation {
    /// Mean of the per-row `lost / (received + lost)`.
    #[default]
    MeanOfRatios,
    /// `sum lost / sum (received + lost)`.
    PooledCounts,
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub columns: ColumnMap,
    pub aggregation: LossAggregation,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    /// One record per user, sorted by user id.
    pub records: Vec<UserNetRecord>,
    pub skipped_rows: usize,
}

#[derive(Default)]
struct Acc {
    rows: usize,
    received: f64,
    lost: f64,
    throughput: f64,
    ratio_sum: f64,
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("{}: missing column '{name}'", path.display())))
    };
    let c = &opts.columns;
    let (ci, cr, cl, ct) = (col(&c.user_id)?, col(&c.received)?, col(&c.lost)?, col(&c.throughput)?);

    let mut users: BTreeMap<String, Acc> = BTreeMap::new();
    let mut skipped = 0;
    for row in reader.records() {
        let Ok(row) = row else {
            skipped += 1;
            continue;
        };
        let num = |i: usize| row.get(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        let (Some(id), Some(recv), Some(lost), Some(tp)) = (row.get(ci), num(cr), num(cl), num(ct)) else {
            skipped += 1;
            continue;
        };
        if id.is_empty() || recv < 0.0 || lost < 0.0 || recv + lost <= 0.0 || tp <= 0.0 {
            skipped += 1;
            continue;
        }
        let acc = users.entry(id.to_string()).or_default();
        acc.rows += 1;
        acc.received += recv;
        acc.lost += lost;
        acc.throughput += tp;
        acc.ratio_sum += lost / (recv + lost);
    }
    if users.is_empty() {
        return Err(Error::Empty("trace has no valid rows"));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed rows", path.display());
    }
    let records = users
        .into_iter()
        .map(|(user_id, a)| {
            let n = a.rows as f64;
            let loss_ratio = match opts.aggregation {
                LossAggregation::MeanOfRatios => a.ratio_sum / n,
                LossAggregation::PooledCounts => a.lost / (a.received + a.lost),
            };
            UserNetRecord {
                user_id,
                received_packets: a.received / n,
                lost_packets: a.lost / n,
                throughput_mbps: a.throughput / n,
                loss_ratio,
            }
        })
        .collect();
    Ok(Ingested {
        records,
        skipped_rows: skipped,
    })
}

/// Empirical CDF: one `(value, fraction <= value)` point per distinct value, ascending.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match points.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => points.push((v, frac)),
        }
    }
    points
}

/// Evaluate a CDF (as returned by [`cdf`]) at `x`.
pub fn cdf_at(points: &[(f64, f64)], x: f64) -> f64 {
    match points.partition_point(|&(v, _)| v <= x) {
        0 => 0.0,
        i => points[i - 1].1,
    }
}

/// Fraction of users whose throughput is strictly above `threshold_mbps`.
pub fn eligible_ratio_at(records: &[UserNetRecord], threshold_mbps: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("trace records"));
    }
    let above = records.iter().filter(|r| r.throughput_mbps > threshold_mbps).count();
    Ok(above as f64 / records.len() as f64)
}

pub fn render_cdf_csv(points: &[(f64, f64)], value_column: &str) -> String {
    let mut out = format!("{value_column},cdf\n");
    for (v, f) in points {
        let _ = writeln!(out, "{v},{f}");
    }
    out
}

pub fn write_cdf_csv(points: &[(f64, f64)], value_column: &str, path: &Path) -> Result<()> {
    write_atomic(path, &render_cdf_csv(points, value_column))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn ingest_str(text: &str) -> Result<Ingested> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, text).unwrap();
        ingest(&p, &IngestOptions::default())
    }

    #[test]
    fn rows_for_one_user_average() {
        let got = ingest_str("user_id,received,lost,throughput_mbps\na,90,10,1.0\na,80,20,3.0\n").unwrap();
        assert_eq!(got.records.len(), 1);
        let r = &got.records[0];
        assert!((r.loss_ratio - 0.15).abs() < 1e-12);
        assert_eq!(r.throughput_mbps, 2.0);
    }

    #[test]
    fn pooled_counts_rule() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "user_id,received,lost,throughput_mbps\na,90,10,1\na,300,100,1\n").unwrap();
        let opts = IngestOptions {
            aggregation: LossAggregation::PooledCounts,
            ..Default::default()
        };
        let r = &ingest(&p, &opts).unwrap().records[0];
        assert!((r.loss_ratio - 110.0 / 500.0).abs() < 1e-12);
    }

    #[test]
    fn zero_packet_rows_skipped() {
        let got = ingest_str("user_id,received,lost,throughput_mbps\na,0,0,1\nb,5,5,1\n").unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.skipped_rows, 1);
    }

    #[test]
    fn empty_file_is_error() {
        assert!(ingest_str("user_id,received,lost,throughput_mbps\n").is_err());
        assert!(ingest_str("").is_err());
    }

    #[test]
    fn custom_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "unit,up_mbps,ok,bad\nx,4.5,99,1\n").unwrap();
        let opts = IngestOptions {
            columns: ColumnMap {
                user_id: "unit".into(),
                received: "ok".into(),
                lost: "bad".into(),
                throughput: "up_mbps".into(),
            },
            ..Default::default()
        };
        let r = &ingest(&p, &opts).unwrap().records[0];
        assert_eq!((r.loss_ratio, r.throughput_mbps), (0.01, 4.5));
        assert!(ingest(&p, &IngestOptions::default()).is_err());
    }

    #[test]
    fn cdf_points() {
        let pts = cdf(&[3.0, 1.0, 4.0, 2.0]);
        assert_eq!(pts, vec![(1.0, 0.25), (2.0, 0.5), (3.0, 0.75), (4.0, 1.0)]);
        assert_eq!(cdf_at(&pts, 2.0), 0.5);
        assert_eq!(cdf_at(&pts, 0.5), 0.0);
        assert_eq!(cdf_at(&pts, 9.0), 1.0);
        assert_eq!(cdf(&[7.0; 5]), vec![(7.0, 1.0)]);
    }

    fn rec(tp: f64) -> UserNetRecord {
        UserNetRecord {
            user_id: String::new(),
            received_packets: 1.0,
            lost_packets: 0.0,
            throughput_mbps: tp,
            loss_ratio: 0.0,
        }
    }

    #[test]
    fn eligible_ratio_edges() {
        let recs: Vec<_> = [0.5, 1.0, 3.0, 10.0].into_iter().map(rec).collect();
        assert_eq!(eligible_ratio_at(&recs, 0.0).unwrap(), 1.0);
        assert_eq!(eligible_ratio_at(&recs, 2.0).unwrap(), 0.5);
        assert_eq!(eligible_ratio_at(&recs, 11.0).unwrap(), 0.0);
        assert!(eligible_ratio_at(&[], 1.0).is_err());
    }

    #[test]
    fn cdf_csv_layout() {
        let text = render_cdf_csv(&cdf(&[0.5, 0.25]), "loss_ratio");
        assert_eq!(text, "loss_ratio,cdf\n0.25,0.5\n0.5,1\n");
    }
}
