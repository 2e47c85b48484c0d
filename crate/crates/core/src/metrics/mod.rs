//! Point-forecast metrics: MSE, MAE, directional accuracy and the
//! Error Ranking Number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Predictions `ŷ`, targets `y` and last observed volumes `y_last`.
#[derive(Debug, Clone, Copy)]
pub struct EvalBatch<'a> {
    predictions: &'a [f64],
    targets: &'a [f64],
    last_volumes: &'a [f64],
}

impl<'a> EvalBatch<'a> {
    pub fn new(predictions: &'a [f64], targets: &'a [f64], last_volumes: &'a [f64]) -> Result<Self> {
        let n = predictions.len();
        if n == 0 || targets.len() != n || last_volumes.len() != n {
            return Err(MetricError::Contract(format!(
                "need equal non-empty lengths, got {n}, {}, {}",
                targets.len(),
                last_volumes.len()
            )));
        }
        Ok(Self {
            predictions,
            targets,
            last_volumes,
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

pub fn mse(b: &EvalBatch) -> f64 {
    let s: f64 = b.predictions.iter().zip(b.targets).map(|(p, y)| (p - y) * (p - y)).sum();
    s / b.len() as f64
}

pub fn mae(b: &EvalBatch) -> f64 {
    let s: f64 = b.predictions.iter().zip(b.targets).map(|(p, y)| (p - y).abs()).sum();
    s / b.len() as f64
}

/// Fraction of samples where `(ŷ − y_last)(y − y_last) > 0`; a zero product
/// counts as wrong.
pub fn directional_accuracy(b: &EvalBatch) -> f64 {
    let hits = (0..b.len())
        .filter(|&i| {
            let l = b.last_volumes[i];
            (b.predictions[i] - l) * (b.targets[i] - l) > 0.0
        })
        .count();
    hits as f64 / b.len() as f64
}

/// Ordered pairs `(i, j)`, `i ≠ j`, with `(yᵢ − yⱼ)(ŷᵢ − ŷⱼ) ≤ 0`, over a
/// seeded uniform subsample of `sample_size` points drawn without replacement.
pub fn error_ranking_number(predictions: &[f64], targets: &[f64], sample_size: usize, seed: u64) -> Result<u64> {
    if predictions.len() != targets.len() {
        return Err(MetricError::Contract("predictions and targets differ in length".into()));
    }
    if sample_size < 2 {
        return Err(MetricError::Contract(format!("sample_size {sample_size} < 2")));
    }
    if sample_size > predictions.len() {
        return Err(MetricError::Contract(format!(
            "sample_size {sample_size} exceeds population {}",
            predictions.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, predictions.len(), sample_size);
    let (p, y): (Vec<f64>, Vec<f64>) = idx.iter().map(|i| (predictions[i], targets[i])).unzip();
    let mut discordant = 0u64;
    for i in 0..sample_size {
        for j in i + 1..sample_size {
            if (y[i] - y[j]) * (p[i] - p[j]) <= 0.0 {
                discordant += 1;
            }
        }
    }
    Ok(2 * discordant)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub acc: f64,
    pub ern: u64,
}

/// All four metrics; the ERN subsample is capped at the batch size.
pub fn evaluate(b: &EvalBatch, ern_sample: usize, seed: u64) -> Result<Metrics> {
    let n = ern_sample.min(b.len());
    let ern = if n >= 2 {
        error_ranking_number(b.predictions, b.targets, n, seed)?
    } else {
        0
    };
    Ok(Metrics {
        mse: mse(b),
        mae: mae(b),
        acc: directional_accuracy(b),
        ern,
    })
}
