//! Report tables, aggregation and file emission.
//!
//! `results.csv`, `summary.csv`, `grid.csv`, `gains.csv` and `traces.csv`
//! contain no wall-clock data, so a fixed config and seed reproduce them
//! byte for byte. Timings go to `timing.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Method, Result};

pub const RESULTS_COLUMNS: [&str; 12] = [
    "seed",
    "method",
    "fraction",
    "lambda_dist",
    "lambda_cosine",
    "mse",
    "mae",
    "acc",
    "ern",
    "best_step",
    "val_score",
    "checkpoint",
];

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "method", "fraction", "seeds", "mse_mean", "mse_std", "mae_mean", "mae_std", "acc_mean", "acc_std", "ern_mean",
    "ern_std",
];

pub const GRID_COLUMNS: [&str; 7] = ["seed", "method", "lambda_dist", "lambda_cosine", "val_mse", "test_mse", "selected"];

pub const TRACE_COLUMNS: [&str; 8] = [
    "seed", "method", "fraction", "lambda_dist", "lambda_cosine", "step", "train_loss", "val_score",
];

pub const GAIN_COLUMNS: [&str; 8] = [
    "method", "counterpart", "fraction", "seeds", "mse_reduction_mean", "mse_reduction_std", "mae_reduction_mean",
    "mae_reduction_std",
];

/// Methods appear in tables under their report labels.
mod label {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Method;

    pub fn serialize<S: Serializer>(m: &Method, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(m.label())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Method, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Test metrics of one method, seed and training fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    #[serde(with = "label")]
    pub method: Method,
    pub fraction: f64,
    pub lambda_dist: f64,
    pub lambda_cosine: f64,
    pub mse: f64,
    pub mae: f64,
    pub acc: f64,
    pub ern: u64,
    pub best_step: usize,
    /// Validation criterion at the selected checkpoint (MSE for students,
    /// mean NLL for the teacher, MSE for moving averages).
    pub val_score: f64,
    pub checkpoint: String,
}

/// One evaluated cell of a λ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub seed: u64,
    #[serde(with = "label")]
    pub method: Method,
    pub lambda_dist: f64,
    pub lambda_cosine: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    #[serde(with = "label")]
    pub method: Method,
    pub fraction: f64,
    pub lambda_dist: f64,
    pub lambda_cosine: f64,
    pub step: usize,
    pub train_loss: f64,
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub seed: u64,
    pub run: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(with = "label")]
    pub method: Method,
    pub fraction: f64,
    pub seeds: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub ern_mean: f64,
    pub ern_std: f64,
}

/// Error reduction of a distilled method over its teacher-free counterpart
/// (positive means distillation helped), averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    #[serde(with = "label")]
    pub method: Method,
    #[serde(with = "label")]
    pub counterpart: Method,
    pub fraction: f64,
    pub seeds: usize,
    pub mse_reduction_mean: f64,
    pub mse_reduction_std: f64,
    pub mae_reduction_mean: f64,
    pub mae_reduction_std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub grid: Vec<GridRow>,
    pub traces: Vec<TraceRow>,
    pub timing: Vec<TimingRow>,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fractions as ordered map keys.
fn fkey(f: f64) -> u64 {
    f.to_bits()
}

impl ExperimentReport {
    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
        self.grid.extend(other.grid);
        self.traces.extend(other.traces);
        self.timing.extend(other.timing);
    }

    pub fn row(&self, seed: u64, method: Method, fraction: f64) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.method == method && r.fraction == fraction)
    }

    /// Rows of one method and fraction, in seed order.
    pub fn rows_for(&self, method: Method, fraction: f64) -> Vec<&ResultRow> {
        let mut v: Vec<&ResultRow> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.fraction == fraction)
            .collect();
        v.sort_by_key(|r| r.seed);
        v
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<(Method, u64), Vec<&ResultRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.method, fkey(r.fraction))).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((method, _), mut rows)| {
                rows.sort_by_key(|r| r.seed);
                let col = |f: fn(&ResultRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (mse_mean, mse_std) = col(|r| r.mse);
                let (mae_mean, mae_std) = col(|r| r.mae);
                let (acc_mean, acc_std) = col(|r| r.acc);
                let (ern_mean, ern_std) = col(|r| r.ern as f64);
                SummaryRow {
                    method,
                    fraction: rows[0].fraction,
                    seeds: rows.len(),
                    mse_mean,
                    mse_std,
                    mae_mean,
                    mae_std,
                    acc_mean,
                    acc_std,
                    ern_mean,
                    ern_std,
                }
            })
            .collect()
    }

    pub fn mean_mse(&self, method: Method, fraction: f64) -> Option<f64> {
        let rows = self.rows_for(method, fraction);
        if rows.is_empty() {
            return None;
        }
        Some(mean_std(&rows.iter().map(|r| r.mse).collect::<Vec<_>>()).0)
    }

    pub fn gains(&self) -> Vec<GainRow> {
        let mut per: BTreeMap<(Method, u64), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &self.rows {
            let Some(base) = r.method.counterpart() else { continue };
            let Some(b) = self.row(r.seed, base, r.fraction) else { continue };
            let e = per.entry((r.method, fkey(r.fraction))).or_insert((r.fraction, vec![], vec![]));
            e.1.push(b.mse - r.mse);
            e.2.push(b.mae - r.mae);
        }
        per.into_iter()
            .map(|((method, _), (fraction, mse, mae))| {
                let (mse_reduction_mean, mse_reduction_std) = mean_std(&mse);
                let (mae_reduction_mean, mae_reduction_std) = mean_std(&mae);
                GainRow {
                    method,
                    counterpart: method.counterpart().expect("filtered above"),
                    fraction,
                    seeds: mse.len(),
                    mse_reduction_mean,
                    mse_reduction_std,
                    mae_reduction_mean,
                    mae_reduction_std,
                }
            })
            .collect()
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let io = |e: csv::Error| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Line plot of mean error reduction against training fraction.
pub fn gain_plot_svg(gains: &[GainRow], metric: &str) -> String {
    let value = |g: &GainRow| if metric == "mae" { g.mae_reduction_mean } else { g.mse_reduction_mean };
    let mut series: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for g in gains {
        series.entry(g.method).or_default().push((g.fraction, value(g)));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 180.0, 30.0, 50.0);
    let ys: Vec<f64> = series.values().flatten().map(|p| p.1).chain([0.0]).collect();
    let (mut lo, mut hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |x: f64| left + x * (w - left - right);
    let py = |y: f64| top + (hi - y) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (px(0.0), px(1.0), py(lo), py(hi));
    let _ = writeln!(s, r#"<path d="M{x0:.2},{y1:.2} V{y0:.2} H{x1:.2}" stroke="black" fill="none"/>"#);
    let zero = py(0.0);
    let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{zero:.2}" x2="{x1:.2}" y2="{zero:.2}" stroke="#999" stroke-dasharray="4 3"/>"##);
    for k in 0..=10 {
        let f = k as f64 / 10.0;
        let x = px(f);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}%</text>"#, y0 + 16.0, k * 10);
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.4}</text>"#, x0 - 6.0, py(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">training data fraction</text>"#, (x0 + x1) / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">{} reduction</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0, metric.to_uppercase());
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(" "));
        for (x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(*x), py(*y));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, w - right + 15.0, w - right + 35.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, w - right + 40.0, ly + 4.0, method.label());
    }
    s.push_str("</svg>\n");
    s
}

/// Per-seed rows from a previously emitted `results.csv`.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let io = |source: std::io::Error| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => io(source),
        other => ExperimentError::Config(format!("{}: {other:?}", path.display())),
    })?;
    let header = r.headers().map_err(|e| ExperimentError::Config(e.to_string()))?;
    if header.iter().ne(RESULTS_COLUMNS) {
        return Err(ExperimentError::Config(format!("{}: unexpected columns", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Write every report file into `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_rows(&dir.join("results.csv"), &RESULTS_COLUMNS, &report.rows)?;
    write_rows(&dir.join("grid.csv"), &GRID_COLUMNS, &report.grid)?;
    write_rows(&dir.join("traces.csv"), &TRACE_COLUMNS, &report.traces)?;
    write_rows(&dir.join("timing.csv"), &["seed", "run", "seconds"], &report.timing)?;
    emit_derived(report, dir)
}

/// Write only the tables derived from the per-seed rows: summary, gains and
/// sweep plots.
pub fn emit_derived(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_rows(&dir.join("summary.csv"), &SUMMARY_COLUMNS, &report.summary())?;
    let gains = report.gains();
    write_rows(&dir.join("gains.csv"), &GAIN_COLUMNS, &gains)?;
    let distinct_fractions = {
        let mut f: Vec<u64> = gains.iter().map(|g| fkey(g.fraction)).collect();
        f.sort_unstable();
        f.dedup();
        f.len()
    };
    if distinct_fractions > 1 {
        write_text(&dir.join("sweep_mse.svg"), &gain_plot_svg(&gains, "mse"))?;
        write_text(&dir.join("sweep_mae.svg"), &gain_plot_svg(&gains, "mae"))?;
    }
    Ok(())
}
