//! The optimization loop with periodic validation and best-model retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::SampleSet;
use super::{ExperimentError, Result};
use crate::distill::{combined_loss, BatchOutputs, LossConfig, LossError};
use crate::forecaster::{ForecasterError, ForecasterModel};
use crate::gaussian::tape::GaussianVars;
use crate::tensor::{Adam, AdamConfig, Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub max_steps: usize,
    pub eval_batch: usize,
}

impl TrainSettings {
    pub fn from_config(c: &TrainConfig, max_steps: usize) -> Self {
        Self {
            adam: AdamConfig {
                lr: c.lr,
                beta1: c.beta1,
                beta2: c.beta2,
                eps: c.eps,
            },
            batch_size: c.batch_size,
            eval_interval: c.eval_interval,
            max_steps,
            eval_batch: c.eval_batch,
        }
    }
}

/// Model-selection criterion on the validation split (lower is better).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Mse,
    Nll,
}

/// Per-sample Gaussian predictions aligned with a [`SampleSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Predictions {
    pub fn mse(&self, targets: &[f64]) -> f64 {
        let s: f64 = self.mu.iter().zip(targets).map(|(m, y)| (m - y) * (m - y)).sum();
        s / targets.len() as f64
    }

    pub fn mean_nll(&self, targets: &[f64]) -> f64 {
        let s: f64 = self
            .mu
            .iter()
            .zip(&self.sigma)
            .zip(targets)
            .map(|((m, sg), y)| {
                let z = (y - m) / sg;
                0.5 * (2.0 * std::f64::consts::PI).ln() + sg.ln() + 0.5 * z * z
            })
            .sum();
        s / targets.len() as f64
    }

    pub fn score(&self, targets: &[f64], selection: Selection) -> f64 {
        match selection {
            Selection::Mse => self.mse(targets),
            Selection::Nll => self.mean_nll(targets),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous evaluation.
    pub train_loss: f64,
    pub val_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_step: usize,
    pub best_score: f64,
    pub trace: Vec<TracePoint>,
}

pub fn predict_set(model: &ForecasterModel, set: &SampleSet, eval_batch: usize) -> Result<Predictions> {
    let mut mu = Vec::with_capacity(set.len());
    let mut sigma = Vec::with_capacity(set.len());
    let mut start = 0;
    while start < set.len() {
        let end = (start + eval_batch.max(1)).min(set.len());
        let (m, s) = model.predict(set.features_range(start, end), end - start)?;
        mu.extend(m);
        sigma.extend(s);
        start = end;
    }
    Ok(Predictions { mu, sigma })
}

fn divergence(step: usize, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Divergence {
        step,
        detail: e.to_string(),
    }
}

fn step_error(step: usize, e: ForecasterError) -> ExperimentError {
    match e {
        ForecasterError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::Domain { .. })) => divergence(step, t),
        other => other.into(),
    }
}

fn loss_error(step: usize, e: LossError) -> ExperimentError {
    match e {
        LossError::Tensor(t @ (TensorError::NonFinite { .. } | TensorError::Domain { .. })) => divergence(step, t),
        other => other.into(),
    }
}

/// Epoch-shuffled mini-batch indices, deterministic in `seed`.
struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSchedule {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xba7c);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0, batch }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        out
    }
}

/// Train `model` in place and leave it at its best validation checkpoint.
/// `teacher` must be aligned with `train` whenever the loss reads it.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut ForecasterModel,
    train: &SampleSet,
    val: &SampleSet,
    loss: &LossConfig,
    teacher: Option<&Predictions>,
    settings: &TrainSettings,
    selection: Selection,
    seed: u64,
) -> Result<TrainOutcome> {
    loss.validate()?;
    let teacher = if loss.needs_teacher() {
        let t = teacher.ok_or_else(|| ExperimentError::Config("this objective needs teacher outputs".into()))?;
        if t.mu.len() != train.len() {
            return Err(ExperimentError::Config("teacher outputs are not aligned with the training set".into()));
        }
        Some(t)
    } else {
        None
    };
    let b = settings.batch_size;
    if train.len() < b {
        return Err(ExperimentError::Config(format!(
            "training set of {} samples is smaller than one batch of {b}",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(ExperimentError::Config("validation split is empty".into()));
    }

    let cfg = model.config().clone();
    let mut adam = Adam::new(settings.adam);
    let mut schedule = BatchSchedule::new(train.len(), b, seed);
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;
    let mut trace = Vec::new();
    let mut running = 0.0;
    let mut since_eval = 0usize;

    for step in 1..=settings.max_steps {
        let idx = schedule.next();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let window = tape.constant(vec![b, cfg.window_len, cfg.feature_dim], train.gather(idx))?;
        let out = model.forward(&mut tape, &bound, window).map_err(|e| step_error(step, e))?;
        let targets = tape.constant(vec![b], idx.iter().map(|&i| train.targets[i]).collect())?;
        let teacher_vars = match teacher {
            Some(t) => {
                let mu: Vec<f64> = idx.iter().map(|&i| t.mu[i]).collect();
                let sigma: Vec<f64> = idx.iter().map(|&i| t.sigma[i]).collect();
                Some(GaussianVars::constant(&mut tape, &mu, &sigma)?)
            }
            None => None,
        };
        let outputs = BatchOutputs {
            student: out.into(),
            teacher: teacher_vars,
            targets,
        };
        let l = combined_loss(&mut tape, &outputs, loss).map_err(|e| loss_error(step, e))?;
        let value = tape.item(l)?;
        if !value.is_finite() {
            return Err(divergence(step, format!("loss is {value}")));
        }
        tape.backward(l)?;
        model.accumulate_grads(&tape, &bound)?;
        drop(tape);
        adam.step(model.params_mut())?;
        running += value;
        since_eval += 1;

        if step % settings.eval_interval == 0 || step == settings.max_steps {
            let preds = predict_set(model, val, settings.eval_batch).map_err(|e| match e {
                ExperimentError::Model(fe) => step_error(step, fe),
                other => other,
            })?;
            let score = preds.score(&val.targets, selection);
            if !score.is_finite() {
                return Err(divergence(step, format!("validation score is {score}")));
            }
            trace.push(TracePoint {
                step,
                train_loss: running / since_eval as f64,
                val_score: score,
            });
            log::debug!("step {step}: train loss {:.5}, validation {score:.5}", running / since_eval as f64);
            running = 0.0;
            since_eval = 0;
            if best.as_ref().is_none_or(|(_, s, _)| score < *s) {
                best = Some((step, score, model.snapshot()));
            }
        }
    }

    let (best_step, best_score, snapshot) = best.expect("at least one evaluation runs");
    model.restore(&snapshot)?;
    Ok(TrainOutcome {
        best_step,
        best_score,
        trace,
    })
}
