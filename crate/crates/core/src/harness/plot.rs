//! SVG figures from the report CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::{self, HistogramRow, ReportRow};
use crate::error::{Error, Result};

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Default)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    /// Series left out because they had no data.
    pub notes: Vec<String>,
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    step: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else if v.abs() >= 0.01 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

/// Renders line series on shared axes. `x_ticks` are drawn verbatim.
fn line_chart(title: &str, x_label: &str, x_ticks: &[f64], series: &[Series], notes: &[String]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).chain(x_ticks.iter().copied());
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for &t in x_ticks {
        let x = sx(t);
        let _ = writeln!(s, r#"<line class="xtick" x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, tick_label(t));
    }
    for i in 0..=5 {
        let v = y0 + (y1 - y0) * i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(s, r##"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/>"##, LEFT, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, tick_label(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, esc(x_label));

    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (i, &(x, y)) in ser.points.iter().enumerate() {
            let cmd = if i == 0 {
                'M'
            } else if ser.step {
                let _ = write!(d, "H{:.2} ", sx(x));
                'V'
            } else {
                'L'
            };
            if cmd == 'V' {
                let _ = write!(d, "V{:.2} ", sy(y));
            } else {
                let _ = write!(d, "{cmd}{:.2},{:.2} ", sx(x), sy(y));
            }
        }
        let _ = writeln!(s, r#"<path class="series" d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.trim_end());
        if !ser.step {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, esc(&ser.label));
    }
    for (i, note) in notes.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * (series.len() + 1 + i) as f64;
        let _ = writeln!(s, r##"<text class="note" x="{}" y="{y}" fill="#666">{}</text>"##, LEFT + pw + 15.0, esc(note));
    }
    s.push_str("</svg>\n");
    s
}

/// Per-checkpoint means across seeds for the given columns. Columns without
/// any value are reported in `notes` and skipped.
fn curves(rows: &[ReportRow], columns: &[&str], notes: &mut Vec<String>) -> (Vec<f64>, Vec<Series>) {
    let mut ts: Vec<usize> = rows.iter().map(|r| r.t).collect();
    ts.sort_unstable();
    ts.dedup();
    let mut out = Vec::new();
    for col in columns {
        let mut by_t: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in rows {
            if let Some(v) = r.column(col) {
                let e = by_t.entry(r.t).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        if by_t.is_empty() {
            notes.push(format!("{col}: no data, omitted"));
            continue;
        }
        out.push(Series {
            label: col.to_string(),
            points: by_t.into_iter().map(|(t, (s, n))| (t as f64, s / n as f64)).collect(),
            step: false,
        });
    }
    (ts.into_iter().map(|t| t as f64).collect(), out)
}

fn write_file(path: &Path, text: &str, out: &mut PlotOutput) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    out.files.push(path.to_path_buf());
    Ok(())
}

/// Overlaid histograms of one metric at up to three checkpoints (first,
/// middle, last), summing counts over seeds.
fn histogram_chart(rows: &[HistogramRow], split: &str, metric: &str) -> Option<String> {
    let mut by_t: BTreeMap<usize, BTreeMap<u64, (f64, f64, u64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == split && r.metric == metric) {
        let e = by_t.entry(r.t).or_default().entry(r.bin_lo.to_bits()).or_insert((r.bin_lo, r.bin_hi, 0));
        e.2 += r.count;
    }
    if by_t.is_empty() {
        return None;
    }
    let ts: Vec<usize> = by_t.keys().copied().collect();
    let mut pick = vec![ts[0], ts[ts.len() / 2], ts[ts.len() - 1]];
    pick.dedup();
    let series: Vec<Series> = pick
        .iter()
        .map(|t| {
            let mut bins: Vec<(f64, f64, u64)> = by_t[t].values().copied().collect();
            bins.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: u64 = bins.iter().map(|b| b.2).sum::<u64>().max(1);
            let mut pts: Vec<(f64, f64)> = bins.iter().map(|b| (b.0, b.2 as f64 / total as f64)).collect();
            if let Some(last) = bins.last() {
                pts.push((last.1, last.2 as f64 / total as f64));
            }
            Series {
                label: format!("t = {t}"),
                points: pts,
                step: true,
            }
        })
        .collect();
    let edges: Vec<f64> = series[0].points.iter().map(|p| p.0).collect();
    let ticks: Vec<f64> = edges.iter().step_by((edges.len() / 5).max(1)).copied().collect();
    Some(line_chart(&format!("{metric} ({split}), fraction of examples"), metric, &ticks, &series, &[]))
}

/// Writes `errors.svg`, `metrics.svg` and, when a histogram CSV is given,
/// one `hist-<split>-<metric>.svg` per metric and split present.
pub fn emit_plots(report_csv: &Path, histograms_csv: Option<&Path>, out_dir: &Path) -> Result<PlotOutput> {
    let rows = report::read_report(report_csv)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = PlotOutput::default();

    let mut notes = Vec::new();
    let (ticks, series) = curves(
        &rows,
        &["std_train_err", "std_test_err", "rob_train_err", "rob_test_err", "gap", "ide_test_err"],
        &mut notes,
    );
    let svg = line_chart("Errors along adversarial training", "checkpoint t", &ticks, &series, &notes);
    write_file(&out_dir.join("errors.svg"), &svg, &mut out)?;
    out.notes.extend(notes);

    let mut notes = Vec::new();
    let (ticks, series) = curves(&rows, &["eld", "mean_d", "mean_phi"], &mut notes);
    let svg = line_chart("Perturbation metrics", "checkpoint t", &ticks, &series, &notes);
    write_file(&out_dir.join("metrics.svg"), &svg, &mut out)?;
    out.notes.extend(notes);

    if let Some(path) = histograms_csv {
        let hist: Vec<HistogramRow> = report::read_csv(path)?;
        for split in ["train", "test"] {
            for metric in ["dispersion", "distance", "angle"] {
                if let Some(svg) = histogram_chart(&hist, split, metric) {
                    write_file(&out_dir.join(format!("hist-{split}-{metric}.svg")), &svg, &mut out)?;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::report::CsvSink;

    fn rows(n: usize) -> Vec<ReportRow> {
        (1..=n)
            .map(|t| ReportRow {
                seed: 0,
                t,
                std_train_err: Some(0.1 / t as f64),
                rob_test_err: Some(0.3),
                ide_test_err: Some(0.05 * t as f64),
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn three_checkpoints_three_ticks() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("report.csv");
        let mut sink = CsvSink::create(&csv).unwrap();
        for r in rows(3) {
            sink.write(&r).unwrap();
        }
        let out = emit_plots(&csv, None, dir.path()).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("errors.svg")).unwrap();
        assert_eq!(svg.matches("class=\"xtick\"").count(), 3);
        assert_eq!(svg.matches("class=\"series\"").count(), 3);
        assert!(out.notes.iter().any(|n| n.starts_with("gap")));
        let metrics = std::fs::read_to_string(dir.path().join("metrics.svg")).unwrap();
        assert_eq!(metrics.matches("class=\"series\"").count(), 0);
        assert_eq!(metrics.matches("class=\"note\"").count(), 3);
    }

    #[test]
    fn histograms_overlay_three_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("report.csv");
        let mut sink = CsvSink::create(&csv).unwrap();
        for r in rows(4) {
            sink.write(&r).unwrap();
        }
        let hcsv = dir.path().join("hist.csv");
        let mut hs = CsvSink::create(&hcsv).unwrap();
        for t in 1..=4 {
            let mut h = crate::metrics::Histogram::linear(0.0, 1.0, 4).unwrap();
            h.add(0.1 * t as f64);
            for r in report::histogram_rows(0, t, "test", "dispersion", &h) {
                hs.write(&r).unwrap();
            }
        }
        let out = emit_plots(&csv, Some(&hcsv), dir.path()).unwrap();
        assert_eq!(out.files.len(), 3);
        let svg = std::fs::read_to_string(dir.path().join("hist-test-dispersion.svg")).unwrap();
        assert_eq!(svg.matches("class=\"series\"").count(), 3);
    }

    #[test]
    fn malformed_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("bad.csv");
        std::fs::write(&csv, "nonsense\n1\n").unwrap();
        assert!(matches!(emit_plots(&csv, None, dir.path()), Err(Error::MalformedCsv(_))));
    }
}
