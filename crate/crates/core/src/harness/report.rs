//! CSV report rows, histogram dumps and the cross-seed summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Histogram;

/// Bumped whenever a column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 14] = [
    "seed",
    "t",
    "std_train_err",
    "std_test_err",
    "rob_train_err",
    "rob_test_err",
    "gap",
    "ide_train_err",
    "ide_test_err",
    "eld",
    "eld_se",
    "mean_d",
    "mean_phi",
    "bound_value",
];

/// One row per (seed, checkpoint). Missing values are written as empty cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub t: usize,
    pub std_train_err: Option<f64>,
    pub std_test_err: Option<f64>,
    pub rob_train_err: Option<f64>,
    pub rob_test_err: Option<f64>,
    pub gap: Option<f64>,
    pub ide_train_err: Option<f64>,
    pub ide_test_err: Option<f64>,
    pub eld: Option<f64>,
    pub eld_se: Option<f64>,
    pub mean_d: Option<f64>,
    pub mean_phi: Option<f64>,
    pub bound_value: Option<f64>,
}

impl ReportRow {
    /// Value of a numeric column by name.
    pub fn column(&self, name: &str) -> Option<f64> {
        match name {
            "seed" => Some(self.seed as f64),
            "t" => Some(self.t as f64),
            "std_train_err" => self.std_train_err,
            "std_test_err" => self.std_test_err,
            "rob_train_err" => self.rob_train_err,
            "rob_test_err" => self.rob_test_err,
            "gap" => self.gap,
            "ide_train_err" => self.ide_train_err,
            "ide_test_err" => self.ide_test_err,
            "eld" => self.eld,
            "eld_se" => self.eld_se,
            "mean_d" => self.mean_d,
            "mean_phi" => self.mean_phi,
            "bound_value" => self.bound_value,
            _ => None,
        }
    }
}

/// Per-(seed, checkpoint) values that are not part of the fixed report schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub seed: u64,
    pub t: usize,
    pub empirical_gg: Option<f64>,
    /// Empirical lower bound on the Lipschitz constant.
    pub beta_hat_lower: Option<f64>,
    /// Empirical lower bound on the loss bound.
    pub loss_bound_hat_lower: Option<f64>,
    pub bound_holds: Option<bool>,
    pub ide_interpolated: Option<bool>,
    pub ide_test_err_std: Option<f64>,
    pub metrics_excluded: Option<usize>,
}

/// One histogram bin, tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub seed: u64,
    pub t: usize,
    pub split: String,
    pub metric: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
}

pub fn histogram_rows(seed: u64, t: usize, split: &str, metric: &str, h: &Histogram) -> Vec<HistogramRow> {
    h.edges
        .windows(2)
        .zip(&h.counts)
        .map(|(e, &count)| HistogramRow {
            seed,
            t,
            split: split.into(),
            metric: metric.into(),
            bin_lo: e[0],
            bin_hi: e[1],
            count,
        })
        .collect()
}

/// Appending CSV writer that flushes after every record.
pub struct CsvSink {
    inner: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner
            .serialize(row)
            .and_then(|_| self.inner.flush().map_err(csv::Error::from))
            .map_err(|e| Error::MalformedCsv(e.to_string()))
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::MalformedCsv(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::MalformedCsv(format!("{}: {e}", path.display())))
}

/// Reads a report CSV, checking the header against the fixed schema.
pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::MalformedCsv(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| Error::MalformedCsv(e.to_string()))?.clone();
    if header.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::MalformedCsv(format!("unexpected header {:?}", header)));
    }
    drop(rdr);
    read_csv(path)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Means over seeds for one checkpoint index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeans {
    pub t: usize,
    pub seeds: usize,
    pub values: BTreeMap<String, f64>,
}

/// Pearson correlation reported two ways.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Over per-checkpoint means across seeds.
    pub checkpoint_means: Option<f64>,
    /// Over every (seed, checkpoint) row.
    pub pooled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub csv_schema_version: u32,
    pub name: String,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<CheckpointMeans>,
    pub corr_ide_test_err_vs_gap: Correlation,
    pub corr_eld_vs_ide_test_err: Correlation,
    /// Fraction of (seed, checkpoint) runs where the bound exceeded the empirical gap.
    pub bound_soundness: Option<f64>,
    pub ide_not_interpolated: usize,
    pub failures: Vec<String>,
}

fn correlation(rows: &[ReportRow], means: &[CheckpointMeans], a: &str, b: &str) -> Correlation {
    let pairs: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.column(a)?, r.column(b)?))).collect();
    let (px, py): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let mpairs: Vec<(f64, f64)> = means
        .iter()
        .filter_map(|m| Some((*m.values.get(a)?, *m.values.get(b)?)))
        .collect();
    let (mx, my): (Vec<f64>, Vec<f64>) = mpairs.into_iter().unzip();
    Correlation {
        checkpoint_means: pearson(&mx, &my),
        pooled: pearson(&px, &py),
    }
}

pub fn checkpoint_means(rows: &[ReportRow]) -> Vec<CheckpointMeans> {
    let mut by_t: BTreeMap<usize, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        by_t.entry(r.t).or_default().push(r);
    }
    by_t.into_iter()
        .map(|(t, rs)| {
            let mut values = BTreeMap::new();
            for col in &CSV_COLUMNS[2..] {
                let v: Vec<f64> = rs.iter().filter_map(|r| r.column(col)).collect();
                if !v.is_empty() {
                    values.insert(col.to_string(), v.iter().sum::<f64>() / v.len() as f64);
                }
            }
            CheckpointMeans { t, seeds: rs.len(), values }
        })
        .collect()
}

pub fn summarize(name: &str, seeds: &[u64], rows: &[ReportRow], diags: &[DiagnosticsRow], failures: Vec<String>) -> Summary {
    let means = checkpoint_means(rows);
    let checks: Vec<bool> = diags.iter().filter_map(|d| d.bound_holds).collect();
    Summary {
        csv_schema_version: CSV_SCHEMA_VERSION,
        name: name.into(),
        seeds: seeds.to_vec(),
        corr_ide_test_err_vs_gap: correlation(rows, &means, "ide_test_err", "gap"),
        corr_eld_vs_ide_test_err: correlation(rows, &means, "eld", "ide_test_err"),
        checkpoints: means,
        bound_soundness: (!checks.is_empty())
            .then(|| checks.iter().filter(|&&h| h).count() as f64 / checks.len() as f64),
        ide_not_interpolated: diags.iter().filter(|d| d.ide_interpolated == Some(false)).count(),
        failures,
    }
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::MalformedCsv(e.to_string()))?;
    let mut header = vec!["t".to_string(), "seeds".to_string()];
    header.extend(CSV_COLUMNS[2..].iter().map(|c| format!("mean_{c}")));
    w.write_record(&header).map_err(|e| Error::MalformedCsv(e.to_string()))?;
    for m in &summary.checkpoints {
        let mut rec = vec![m.t.to_string(), m.seeds.to_string()];
        rec.extend(CSV_COLUMNS[2..].iter().map(|c| m.values.get(*c).map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec).map_err(|e| Error::MalformedCsv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, t: usize, ide: f64, gap: f64) -> ReportRow {
        ReportRow {
            seed,
            t,
            ide_test_err: Some(ide),
            gap: Some(gap),
            ..Default::default()
        }
    }

    #[test]
    fn header_matches_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut s = CsvSink::create(&p).unwrap();
        s.write(&row(0, 1, 0.1, 0.2)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(read_report(&p).unwrap(), vec![row(0, 1, 0.1, 0.2)]);
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, "t,seed\n1,2\n").unwrap();
        assert!(matches!(read_report(&p), Err(Error::MalformedCsv(_))));
    }

    #[test]
    fn pearson_known_values() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn summary_means_and_correlations() {
        let rows = vec![row(0, 1, 0.1, 0.0), row(1, 1, 0.3, 0.2), row(0, 2, 0.4, 0.3), row(1, 2, 0.6, 0.5)];
        let s = summarize("x", &[0, 1], &rows, &[], vec![]);
        assert_eq!(s.checkpoints.len(), 2);
        assert!((s.checkpoints[0].values["ide_test_err"] - 0.2).abs() < 1e-15);
        assert!(s.corr_ide_test_err_vs_gap.pooled.unwrap() > 0.9);
        assert_eq!(s.corr_eld_vs_ide_test_err.pooled, None);
        assert_eq!(s.bound_soundness, None);
    }

    #[test]
    fn histogram_rows_follow_edges() {
        let mut h = Histogram::linear(0.0, 1.0, 2).unwrap();
        h.add(0.1);
        let rows = histogram_rows(0, 3, "test", "dispersion", &h);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].count, rows[1].bin_lo), (1, 0.5));
    }
}
