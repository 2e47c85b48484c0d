//! OHLCV ingestion, normalization, windowing and chronological splits.

mod baselines;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{ema_predict, sma_predict, EMA_RHO, SMA_PERIODS};
pub use synth::{synth_generate, synth_generate_with, SynthConfig};

pub const CSV_HEADER: [&str; 7] = ["symbol", "timestamp", "open", "high", "low", "close", "volume"];
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("invalid record at line {line} ({symbol} @ {timestamp}): {msg}")]
    Invalid {
        line: u64,
        symbol: String,
        timestamp: String,
        msg: String,
    },
    #[error("data configuration error: {0}")]
    Config(String),
    #[error("insufficient history: need {needed} values, have {have}")]
    InsufficientHistory { needed: usize, have: usize },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvRecord {
    pub symbol: String,
    pub timestamp: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvRecord {
    /// Check the price-ordering and volume invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err("prices must be finite and positive".into());
        }
        if !(self.volume.is_finite() && self.volume >= 0.0) {
            return Err(format!("volume {} must be finite and >= 0", self.volume));
        }
        if self.high < self.low {
            return Err(format!("high {} < low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) || self.open.max(self.close) > self.high {
            return Err("open/close outside the [low, high] range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    #[default]
    Hourly,
    Daily,
}

pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let s = s.trim();
    if let Ok(t) = NaiveDateTime::parse_from_str(s, TIME_FORMAT) {
        return Ok(t);
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S") {
        return Ok(t);
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists"));
    }
    Err(format!("unrecognized timestamp `{s}` (expected ISO-8601)"))
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

/// Read and validate an OHLCV CSV. Records come back grouped by symbol
/// (lexicographic) and sorted by timestamp within each symbol.
pub fn load_csv(path: &Path) -> Result<Vec<OhlcvRecord>> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })?;
    if header.iter().ne(CSV_HEADER) {
        return Err(DataError::Parse {
            line: 1,
            msg: format!("header must be `{}`", CSV_HEADER.join(",")),
        });
    }

    let mut rows: Vec<(u64, OhlcvRecord)> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            row[i].trim().parse::<f64>().map_err(|e| DataError::Parse {
                line,
                msg: format!("column `{}`: {e}", CSV_HEADER[i]),
            })
        };
        let timestamp = parse_timestamp(&row[1]).map_err(|msg| DataError::Parse { line, msg })?;
        let rec = OhlcvRecord {
            symbol: row[0].trim().to_string(),
            timestamp,
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
        };
        if rec.symbol.is_empty() {
            return Err(DataError::Parse { line, msg: "empty symbol".into() });
        }
        rec.validate().map_err(|msg| DataError::Invalid {
            line,
            symbol: rec.symbol.clone(),
            timestamp: format_timestamp(&rec.timestamp),
            msg,
        })?;
        rows.push((line, rec));
    }

    rows.sort_by(|a, b| (&a.1.symbol, a.1.timestamp, a.0).cmp(&(&b.1.symbol, b.1.timestamp, b.0)));
    for pair in rows.windows(2) {
        let (_, a) = &pair[0];
        let (line, b) = &pair[1];
        if a.symbol == b.symbol && a.timestamp == b.timestamp {
            return Err(DataError::Invalid {
                line: *line,
                symbol: b.symbol.clone(),
                timestamp: format_timestamp(&b.timestamp),
                msg: "duplicate timestamp for symbol".into(),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

pub fn write_csv(path: &Path, records: &[OhlcvRecord]) -> Result<()> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    w.write_record(CSV_HEADER).map_err(|e| io(e.into()))?;
    for r in records {
        w.write_record([
            r.symbol.clone(),
            format_timestamp(&r.timestamp),
            r.open.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.close.to_string(),
            r.volume.to_string(),
        ])
        .map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

/// Aggregate intraday records into one bar per calendar day.
pub fn resample_daily(records: &[OhlcvRecord]) -> Vec<OhlcvRecord> {
    let mut out: Vec<OhlcvRecord> = Vec::new();
    for r in records {
        let day = r.timestamp.date().and_hms_opt(0, 0, 0).expect("midnight exists");
        match out.last_mut() {
            Some(d) if d.symbol == r.symbol && d.timestamp == day => {
                d.high = d.high.max(r.high);
                d.low = d.low.min(r.low);
                d.close = r.close;
                d.volume += r.volume;
            }
            _ => out.push(OhlcvRecord {
                timestamp: day,
                symbol: r.symbol.clone(),
                ..*r
            }),
        }
    }
    out
}

/// Contiguous per-symbol runs of records sorted by (symbol, timestamp).
fn by_symbol(records: &[OhlcvRecord]) -> Vec<&[OhlcvRecord]> {
    records
        .chunk_by(|a, b| a.symbol == b.symbol)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymbolStats {
    pub volume_mean: f64,
    pub volume_std: f64,
    pub price_mean: f64,
    pub price_std: f64,
}

/// Per-symbol z-score parameters for `log(1 + volume)` and log-prices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizationStats {
    symbols: BTreeMap<String, SymbolStats>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormalizationStats {
    /// Fit on records strictly before `train_end`. Symbols without training
    /// records are left out; a constant channel is an error.
    pub fn fit(records: &[OhlcvRecord], train_end: NaiveDateTime) -> Result<Self> {
        let mut symbols = BTreeMap::new();
        for run in by_symbol(records) {
            let train: Vec<&OhlcvRecord> = run.iter().filter(|r| r.timestamp < train_end).collect();
            if train.is_empty() {
                continue;
            }
            let (volume_mean, volume_std) = mean_std(train.iter().map(|r| r.volume.ln_1p()));
            let (price_mean, price_std) = mean_std(
                train
                    .iter()
                    .flat_map(|r| [r.open, r.high, r.low, r.close])
                    .map(f64::ln),
            );
            for (channel, std) in [("volume", volume_std), ("price", price_std)] {
                if !(std > 0.0 && std.is_finite()) {
                    return Err(DataError::Config(format!(
                        "symbol {}: {channel} channel is constant over the training split",
                        run[0].symbol
                    )));
                }
            }
            symbols.insert(
                run[0].symbol.clone(),
                SymbolStats {
                    volume_mean,
                    volume_std,
                    price_mean,
                    price_std,
                },
            );
        }
        if symbols.is_empty() {
            return Err(DataError::Config("no records precede the training boundary".into()));
        }
        Ok(Self { symbols })
    }

    pub fn from_parts(symbols: BTreeMap<String, SymbolStats>) -> Result<Self> {
        for (s, st) in &symbols {
            if !(st.volume_std > 0.0 && st.price_std > 0.0) {
                return Err(DataError::Config(format!("symbol {s}: std must be > 0")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn get(&self, symbol: &str) -> Option<&SymbolStats> {
        self.symbols.get(symbol)
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.symbols.keys().map(String::as_str)
    }
}

impl SymbolStats {
    pub fn normalize_volume(&self, v: f64) -> f64 {
        (v.ln_1p() - self.volume_mean) / self.volume_std
    }

    pub fn denormalize_volume(&self, z: f64) -> f64 {
        (z * self.volume_std + self.volume_mean).exp_m1()
    }

    pub fn normalize_price(&self, p: f64) -> f64 {
        (p.ln() - self.price_mean) / self.price_std
    }

    pub fn denormalize_price(&self, z: f64) -> f64 {
        (z * self.price_std + self.price_mean).exp()
    }
}

/// One supervised example: a normalized window and the next slot's volume.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `window_len` rows of (open, close, low, high, volume), row-major.
    pub features: Vec<f64>,
    pub target: f64,
    pub last_volume: f64,
    pub symbol: String,
    pub window_start: NaiveDateTime,
    pub last_input: NaiveDateTime,
    pub target_time: NaiveDateTime,
    /// Normalized volumes of earlier records in the target's slot of day,
    /// oldest first, at most [`SMA_PERIODS`] of them.
    pub slot_history: Vec<f64>,
}

fn slot_key(t: &NaiveDateTime, resolution: Resolution) -> u32 {
    match resolution {
        Resolution::Hourly => t.hour() * 60 + t.minute(),
        Resolution::Daily => 0,
    }
}

/// Sliding windows predicting the next record's volume, one per position.
/// Symbols with too little history or without stats are skipped with a warning.
pub fn build_windows(
    records: &[OhlcvRecord],
    window_len: usize,
    resolution: Resolution,
    stats: &NormalizationStats,
) -> Result<Vec<WindowSample>> {
    if window_len == 0 {
        return Err(DataError::Config("window_len must be positive".into()));
    }
    let mut out = Vec::new();
    for run in by_symbol(records) {
        let symbol = &run[0].symbol;
        let Some(st) = stats.get(symbol) else {
            log::warn!("symbol {symbol}: no normalization stats, skipped");
            continue;
        };
        if run.len() <= window_len {
            log::warn!("symbol {symbol}: {} records, need more than {window_len}; skipped", run.len());
            continue;
        }
        let rows: Vec<[f64; 5]> = run
            .iter()
            .map(|r| {
                [
                    st.normalize_price(r.open),
                    st.normalize_price(r.close),
                    st.normalize_price(r.low),
                    st.normalize_price(r.high),
                    st.normalize_volume(r.volume),
                ]
            })
            .collect();
        let mut slot_seen: HashMap<u32, Vec<f64>> = HashMap::new();
        for (i, r) in run.iter().enumerate() {
            let key = slot_key(&r.timestamp, resolution);
            let seen = slot_seen.entry(key).or_default();
            if i >= window_len {
                let from = seen.len().saturating_sub(SMA_PERIODS);
                out.push(WindowSample {
                    features: rows[i - window_len..i].iter().flatten().copied().collect(),
                    target: rows[i][4],
                    last_volume: rows[i - 1][4],
                    symbol: symbol.clone(),
                    window_start: run[i - window_len].timestamp,
                    last_input: run[i - 1].timestamp,
                    target_time: r.timestamp,
                    slot_history: seen[from..].to_vec(),
                });
            }
            seen.push(rows[i][4]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitBoundaries {
    pub train_end: NaiveDateTime,
    pub val_end: NaiveDateTime,
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Train targets precede `train_end`; validation windows start at or after
/// `train_end` with targets before `val_end`; test windows start at or after
/// `val_end`. Windows straddling a boundary are dropped. Each split is
/// ordered by (target time, symbol).
pub fn chronological_split(samples: Vec<WindowSample>, b: SplitBoundaries) -> Result<Splits> {
    if b.train_end >= b.val_end {
        return Err(DataError::Config("train_end must precede val_end".into()));
    }
    let mut s = Splits::default();
    for w in samples {
        if w.target_time < b.train_end {
            s.train.push(w);
        } else if w.window_start >= b.train_end && w.target_time < b.val_end {
            s.validation.push(w);
        } else if w.window_start >= b.val_end {
            s.test.push(w);
        }
    }
    for (name, part) in [("train", &mut s.train), ("validation", &mut s.validation), ("test", &mut s.test)] {
        if part.is_empty() {
            return Err(DataError::Config(format!("{name} split is empty")));
        }
        part.sort_by(|x, y| (x.target_time, &x.symbol).cmp(&(y.target_time, &y.symbol)));
    }
    Ok(s)
}

/// The earliest `⌈fraction · n⌉` samples of a chronologically ordered split.
pub fn chronological_prefix(samples: &[WindowSample], fraction: f64) -> Result<&[WindowSample]> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = (fraction * samples.len() as f64).ceil() as usize;
    Ok(&samples[..n.min(samples.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "symbol,timestamp,open,high,low,close,volume\n";

    #[test]
    fn loads_well_formed_file() {
        let f = write(&format!(
            "{HEADER}B,2018-01-02T09:00:00,10,11,9,10.5,100\nA,2018-01-02T10:00:00,5,6,4,5,0\nA,2018-01-02T09:00:00,5,6,4,5.5,200\n"
        ));
        let r = load_csv(f.path()).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!((r[0].symbol.as_str(), r[0].timestamp), ("A", ts("2018-01-02T09:00:00")));
        assert_eq!(r[2].symbol, "B");
    }

    #[test]
    fn rejects_high_below_low_with_line() {
        let f = write(&format!("{HEADER}A,2018-01-02,5,6,4,5,1\nA,2018-01-03,5,4,6,5,1\n"));
        match load_csv(f.path()) {
            Err(DataError::Invalid { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_malformed_rows() {
        let f = write(&format!("{HEADER}A,2018-01-02,5,6,4,5,1\nA,2018-01-02,5,6,4,5,2\n"));
        assert!(matches!(load_csv(f.path()), Err(DataError::Invalid { msg, .. }) if msg.contains("duplicate")));
        let f = write(&format!("{HEADER}A,2018-01-02,5,six,4,5,1\n"));
        assert!(matches!(load_csv(f.path()), Err(DataError::Parse { line: 2, .. })));
        let f = write(&format!("{HEADER}A,2018-01-02,5,6,4,5,-1\n"));
        assert!(matches!(load_csv(f.path()), Err(DataError::Invalid { .. })));
        let f = write("symbol,time,open,high,low,close,volume\n");
        assert!(matches!(load_csv(f.path()), Err(DataError::Parse { line: 1, .. })));
        let f = write(&format!("{HEADER}A,yesterday,5,6,4,5,1\n"));
        assert!(matches!(load_csv(f.path()), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn csv_round_trip() {
        let recs = synth_generate(2, 30, 1);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(f.path(), &recs).unwrap();
        assert_eq!(load_csv(f.path()).unwrap(), recs);
    }

    fn constant_series(n: usize) -> Vec<OhlcvRecord> {
        let start = ts("2018-01-01");
        (0..n)
            .map(|i| OhlcvRecord {
                symbol: "C".into(),
                timestamp: start + chrono::Duration::days(i as i64),
                open: 10.0,
                high: 10.0,
                low: 10.0,
                close: 10.0,
                volume: 500.0,
            })
            .collect()
    }

    fn manual_stats() -> NormalizationStats {
        let st = SymbolStats {
            volume_mean: 6.0,
            volume_std: 0.5,
            price_mean: 2.0,
            price_std: 0.1,
        };
        NormalizationStats::from_parts(BTreeMap::from([("C".to_string(), st)])).unwrap()
    }

    #[test]
    fn window_counting_and_constancy() {
        let recs = constant_series(21);
        let w = build_windows(&recs, 20, Resolution::Daily, &manual_stats()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].target, w[0].last_volume);
        assert_eq!(w[0].features.len(), 100);
        assert_eq!(w[0].last_volume, w[0].features[99]);
        assert!(build_windows(&recs[..20], 20, Resolution::Daily, &manual_stats()).unwrap().is_empty());
    }

    #[test]
    fn fit_rejects_constant_channel() {
        assert!(matches!(
            NormalizationStats::fit(&constant_series(10), ts("2019-01-01")),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn windows_never_look_ahead() {
        let recs = synth_generate(3, 200, 2);
        let stats = NormalizationStats::fit(&recs, recs[100].timestamp).unwrap();
        for w in build_windows(&recs, 10, Resolution::Hourly, &stats).unwrap() {
            assert!(w.window_start <= w.last_input && w.last_input < w.target_time);
            assert_eq!(w.last_volume, w.features[w.features.len() - 1]);
            assert!(w.slot_history.len() <= SMA_PERIODS);
        }
    }

    #[test]
    fn slot_history_uses_same_time_of_day() {
        let cfg = SynthConfig::default();
        let recs = synth_generate(1, cfg.slots_per_day * 30, 3);
        let stats = NormalizationStats::fit(&recs, recs[recs.len() - 1].timestamp).unwrap();
        let st = stats.get(&recs[0].symbol).unwrap();
        let w = build_windows(&recs, 5, Resolution::Hourly, &stats).unwrap();
        let last = w.last().unwrap();
        let expect: Vec<f64> = recs[..recs.len() - 1]
            .iter()
            .filter(|r| r.timestamp.hour() == last.target_time.hour())
            .map(|r| st.normalize_volume(r.volume))
            .collect();
        assert_eq!(last.slot_history, expect[expect.len() - SMA_PERIODS..]);
    }

    #[test]
    fn normalization_round_trip() {
        let st = SymbolStats {
            volume_mean: 8.3,
            volume_std: 1.7,
            price_mean: 3.1,
            price_std: 0.4,
        };
        for v in [0.0, 1.0, 123.0, 5e6] {
            assert!((st.denormalize_volume(st.normalize_volume(v)) - v).abs() <= 1e-10 * v.max(1.0));
        }
        for p in [0.5, 22.0, 3000.0] {
            assert!((st.denormalize_price(st.normalize_price(p)) - p).abs() <= 1e-10 * p);
        }
    }

    #[test]
    fn stats_ignore_post_boundary_data() {
        let recs = synth_generate(2, 100, 4);
        let cut = recs[60].timestamp;
        let a = NormalizationStats::fit(&recs, cut).unwrap();
        let mut altered = recs.clone();
        for r in altered.iter_mut().filter(|r| r.timestamp >= cut) {
            r.volume *= 7.0;
            r.high *= 2.0;
        }
        assert_eq!(a, NormalizationStats::fit(&altered, cut).unwrap());
    }

    #[test]
    fn split_rules() {
        let recs = synth_generate(2, 400, 5);
        let train_end = recs[150].timestamp;
        let val_end = recs[280].timestamp;
        let stats = NormalizationStats::fit(&recs, train_end).unwrap();
        let all = build_windows(&recs, 10, Resolution::Hourly, &stats).unwrap();
        let total = all.len();
        let s = chronological_split(all, SplitBoundaries { train_end, val_end }).unwrap();
        let last_train = s.train.iter().map(|w| w.target_time).max().unwrap();
        assert!(last_train < train_end);
        assert!(s.validation.iter().all(|w| w.window_start >= train_end && w.target_time < val_end));
        assert!(s.test.iter().all(|w| w.window_start >= val_end && w.window_start > last_train));
        // straddling windows: 10 per symbol per boundary
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), total - 2 * 2 * 10);
        let bad = SplitBoundaries { train_end: val_end, val_end: train_end };
        assert!(chronological_split(vec![], bad).is_err());
    }

    #[test]
    fn prefix_is_nested_and_chronological() {
        let recs = synth_generate(2, 300, 6);
        let stats = NormalizationStats::fit(&recs, recs[200].timestamp).unwrap();
        let all = build_windows(&recs, 10, Resolution::Hourly, &stats).unwrap();
        let s = chronological_split(
            all,
            SplitBoundaries {
                train_end: recs[200].timestamp,
                val_end: recs[250].timestamp,
            },
        )
        .unwrap();
        let small = chronological_prefix(&s.train, 0.1).unwrap();
        let big = chronological_prefix(&s.train, 0.5).unwrap();
        assert_eq!(small, &big[..small.len()]);
        assert_eq!(small.len(), (0.1 * s.train.len() as f64).ceil() as usize);
        assert_eq!(chronological_prefix(&s.train, 1.0).unwrap().len(), s.train.len());
        assert!(chronological_prefix(&s.train, 0.0).is_err());
    }

    #[test]
    fn daily_resample_aggregates() {
        let cfg = SynthConfig::default();
        let recs = synth_generate(1, cfg.slots_per_day * 3, 7);
        let d = resample_daily(&recs);
        assert_eq!(d.len(), 3);
        let first = &recs[..cfg.slots_per_day];
        assert_eq!(d[0].open, first[0].open);
        assert_eq!(d[0].close, first[cfg.slots_per_day - 1].close);
        assert_eq!(d[0].volume, first.iter().map(|r| r.volume).sum::<f64>());
        assert!(d.iter().all(|r| r.validate().is_ok()));
    }
}
