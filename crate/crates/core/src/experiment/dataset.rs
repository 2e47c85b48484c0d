//! Turns a configuration into normalized train/validation/test tensors.

use chrono::NaiveDateTime;

use super::config::{DataSource, ExperimentConfig};
use super::{ExperimentError, Result};
use crate::data::{
    self, build_windows, chronological_split, parse_timestamp, NormalizationStats, OhlcvRecord, Resolution,
    SplitBoundaries, WindowSample,
};
use crate::forecaster::FEATURE_DIM;

/// Samples stored contiguously for fast batch gathering.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    window_len: usize,
    features: Vec<f64>,
    pub targets: Vec<f64>,
    pub last_volumes: Vec<f64>,
    pub slot_history: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn from_windows(window_len: usize, samples: &[WindowSample]) -> Self {
        let mut features = Vec::with_capacity(samples.len() * window_len * FEATURE_DIM);
        for s in samples {
            features.extend_from_slice(&s.features);
        }
        Self {
            window_len,
            features,
            targets: samples.iter().map(|s| s.target).collect(),
            last_volumes: samples.iter().map(|s| s.last_volume).collect(),
            slot_history: samples.iter().map(|s| s.slot_history.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    fn row_len(&self) -> usize {
        self.window_len * FEATURE_DIM
    }

    /// Features of samples `start..end`, flattened.
    pub fn features_range(&self, start: usize, end: usize) -> &[f64] {
        &self.features[start * self.row_len()..end * self.row_len()]
    }

    /// Features of the given samples, flattened in index order.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let r = self.row_len();
        let mut out = Vec::with_capacity(idx.len() * r);
        for &i in idx {
            out.extend_from_slice(&self.features[i * r..(i + 1) * r]);
        }
        out
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            window_len: self.window_len,
            features: self.features[..n * self.row_len()].to_vec(),
            targets: self.targets[..n].to_vec(),
            last_volumes: self.last_volumes[..n].to_vec(),
            slot_history: self.slot_history[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: NormalizationStats,
    pub boundaries: SplitBoundaries,
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
}

pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<OhlcvRecord>> {
    let d = &cfg.data;
    let records = match d.source {
        DataSource::Synthetic => {
            let s = &d.synthetic;
            let recs = data::synth_generate_with(&s.process, s.num_symbols, s.num_slots, s.seed);
            match d.resolution {
                Resolution::Hourly => recs,
                Resolution::Daily => data::resample_daily(&recs),
            }
        }
        DataSource::Csv => {
            let path = d.csv_path.as_ref().ok_or_else(|| ExperimentError::Config("csv_path missing".into()))?;
            data::load_csv(path)?
        }
    };
    if records.is_empty() {
        return Err(ExperimentError::Config("data source produced no records".into()));
    }
    Ok(records)
}

fn boundaries(cfg: &ExperimentConfig, records: &[OhlcvRecord]) -> Result<SplitBoundaries> {
    let d = &cfg.data;
    if let (Some(a), Some(b)) = (&d.train_end, &d.val_end) {
        let parse = |s: &str| parse_timestamp(s).map_err(ExperimentError::Config);
        return Ok(SplitBoundaries {
            train_end: parse(a)?,
            val_end: parse(b)?,
        });
    }
    let mut times: Vec<NaiveDateTime> = records.iter().map(|r| r.timestamp).collect();
    times.sort_unstable();
    times.dedup();
    let at = |f: f64| times[((f * times.len() as f64) as usize).min(times.len() - 1)];
    Ok(SplitBoundaries {
        train_end: at(d.train_fraction),
        val_end: at(d.train_fraction + d.val_fraction),
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let records = load_records(cfg)?;
    let b = boundaries(cfg, &records)?;
    let stats = NormalizationStats::fit(&records, b.train_end)?;
    let windows = build_windows(&records, cfg.data.window_len, cfg.data.resolution, &stats)?;
    let splits = chronological_split(windows, b)?;
    let w = cfg.data.window_len;
    log::info!(
        "data: {} records, {} train / {} validation / {} test samples",
        records.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );
    Ok(PreparedData {
        stats,
        boundaries: b,
        train: SampleSet::from_windows(w, &splits.train),
        validation: SampleSet::from_windows(w, &splits.validation),
        test: SampleSet::from_windows(w, &splits.test),
    })
}
