//! Training objectives: likelihood, distributional and correlational
//! distillation, and the point-prediction baselines.
//!
//! Every loss is built on a [`Tape`] from a [`BatchOutputs`]. Teacher outputs
//! enter as constants, so no gradient can reach teacher parameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::tape::{correlation_matrix, kl_divergence, log_likelihood, GaussianVars};
use crate::gaussian::CorrelationMetric;
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which distance-wise correlation backs the Dist-CKD term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistMetric {
    #[default]
    PaperForm,
    JeffreysExact,
}

impl From<DistMetric> for CorrelationMetric {
    fn from(m: DistMetric) -> Self {
        match m {
            DistMetric::PaperForm => CorrelationMetric::DistPaper,
            DistMetric::JeffreysExact => CorrelationMetric::JeffreysExact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Weighted sum of the distributional terms.
    #[default]
    None,
    MinMse,
    VanillaKd,
    Ail,
    /// Gaussian head trained on likelihood alone.
    Deepar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_nll: f64,
    pub lambda_dkd: f64,
    pub lambda_dist: f64,
    pub lambda_cosine: f64,
    pub dist_metric: DistMetric,
    pub baseline_mode: BaselineMode,
    /// Weight of the ground-truth term in Vanilla KD and AIL.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_nll: 0.5,
            lambda_dkd: 0.5,
            lambda_dist: 0.0,
            lambda_cosine: 0.0,
            dist_metric: DistMetric::PaperForm,
            baseline_mode: BaselineMode::None,
            alpha: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_nll, self.lambda_dkd, self.lambda_dist, self.lambda_cosine];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(LossError::Contract("loss weights must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::Contract(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if self.baseline_mode == BaselineMode::None && lambdas.iter().all(|l| *l == 0.0) {
            return Err(LossError::Contract("every loss weight is zero".into()));
        }
        Ok(())
    }

    /// Whether training under this config reads teacher outputs.
    pub fn needs_teacher(&self) -> bool {
        match self.baseline_mode {
            BaselineMode::None => self.lambda_dkd > 0.0 || self.lambda_dist > 0.0 || self.lambda_cosine > 0.0,
            BaselineMode::VanillaKd | BaselineMode::Ail => true,
            BaselineMode::MinMse | BaselineMode::Deepar => false,
        }
    }

    /// Whether the student's sigma head takes part in training.
    pub fn uses_sigma(&self) -> bool {
        matches!(self.baseline_mode, BaselineMode::None | BaselineMode::Deepar)
    }
}

/// One mini-batch worth of predictions and targets, all `[m]` nodes.
/// Point-prediction losses read only the `mu` fields.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs {
    pub student: GaussianVars,
    pub teacher: Option<GaussianVars>,
    pub targets: Var,
}

impl BatchOutputs {
    fn size(&self, tape: &Tape) -> Result<usize> {
        let m = tape.shape(self.student.mu);
        let ok = m.len() == 1
            && m[0] >= 1
            && tape.shape(self.student.sigma) == m
            && tape.shape(self.targets) == m
            && self
                .teacher
                .is_none_or(|t| tape.shape(t.mu) == m && tape.shape(t.sigma) == m);
        if !ok {
            return Err(LossError::Contract("batch outputs must be equal-length vectors with m >= 1".into()));
        }
        Ok(m[0])
    }

    fn teacher(&self) -> Result<GaussianVars> {
        self.teacher
            .ok_or_else(|| LossError::Contract("teacher outputs required by a distillation term".into()))
    }
}

/// `−Σᵢ log p(yᵢ | μᵢ, σᵢ)`.
pub fn nll_loss(tape: &mut Tape, out: &BatchOutputs) -> Result<Var> {
    out.size(tape)?;
    let ll = log_likelihood(tape, out.targets, out.student)?;
    let s = tape.sum(ll)?;
    Ok(tape.neg(s)?)
}

/// `Σᵢ KL(teacherᵢ ‖ studentᵢ)`.
pub fn dkd_loss(tape: &mut Tape, out: &BatchOutputs) -> Result<Var> {
    out.size(tape)?;
    let t = out.teacher()?;
    let kl = kl_divergence(tape, t.mu, t.sigma, out.student.mu, out.student.sigma)?;
    Ok(tape.sum(kl)?)
}

/// `(1/m²) Σᵢⱼ (φ(Sᵢ, Sⱼ) − φ(Tᵢ, Tⱼ))²` over the mini-batch.
pub fn ckd_loss(tape: &mut Tape, out: &BatchOutputs, metric: CorrelationMetric) -> Result<Var> {
    let m = out.size(tape)?;
    let t = out.teacher()?;
    let cs = correlation_matrix(tape, out.student, metric)?;
    let ct = correlation_matrix(tape, t, metric)?;
    let d = tape.sub(cs, ct)?;
    let d2 = tape.square(d)?;
    let s = tape.sum(d2)?;
    Ok(tape.scale(s, 1.0 / (m * m) as f64)?)
}

fn mean_sq_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    Ok(tape.mean(d2)?)
}

/// `mean((ŷ − y)²)` on the student mean.
pub fn min_mse_loss(tape: &mut Tape, out: &BatchOutputs) -> Result<Var> {
    out.size(tape)?;
    mean_sq_diff(tape, out.student.mu, out.targets)
}

/// `α·mean((ŷˢ − y)²) + (1 − α)·mean((ŷˢ − ŷᵀ)²)`.
pub fn vanilla_kd_loss(tape: &mut Tape, out: &BatchOutputs, alpha: f64) -> Result<Var> {
    out.size(tape)?;
    let t = out.teacher()?;
    let hard = mean_sq_diff(tape, out.student.mu, out.targets)?;
    let soft = mean_sq_diff(tape, out.student.mu, t.mu)?;
    let hard = tape.scale(hard, alpha)?;
    let soft = tape.scale(soft, 1.0 - alpha)?;
    Ok(tape.add(hard, soft)?)
}

/// Imitation weights `wᵢ = 1 − eᵢ/η`, where `eᵢ` is the teacher's squared
/// error and `η` its batch maximum. A perfect teacher gets weight one everywhere.
pub fn ail_weights(teacher: &[f64], targets: &[f64]) -> Vec<f64> {
    let err: Vec<f64> = teacher.iter().zip(targets).map(|(t, y)| (t - y) * (t - y)).collect();
    let eta = err.iter().copied().fold(0.0, f64::max);
    if eta == 0.0 {
        return vec![1.0; err.len()];
    }
    err.iter().map(|e| 1.0 - e / eta).collect()
}

/// `α·mean((ŷˢ − y)²) + (1 − α)·mean(wᵢ·(ŷˢᵢ − ŷᵀᵢ)²)` with [`ail_weights`].
pub fn ail_loss(tape: &mut Tape, out: &BatchOutputs, alpha: f64) -> Result<Var> {
    let m = out.size(tape)?;
    let t = out.teacher()?;
    let w = ail_weights(tape.value(t.mu), tape.value(out.targets));
    let w = tape.constant(vec![m], w)?;
    let hard = mean_sq_diff(tape, out.student.mu, out.targets)?;
    let d = tape.sub(out.student.mu, t.mu)?;
    let d2 = tape.square(d)?;
    let wd = tape.mul(w, d2)?;
    let soft = tape.mean(wd)?;
    let hard = tape.scale(hard, alpha)?;
    let soft = tape.scale(soft, 1.0 - alpha)?;
    Ok(tape.add(hard, soft)?)
}

/// The objective selected by `cfg`. Without a baseline mode this is
/// `λ_NLL·NLL + λ_DKD·DKD + λ_Dist·Dist-CKD + λ_Cosine·Cosine-CKD`, where
/// terms with zero weight are not built.
pub fn combined_loss(tape: &mut Tape, out: &BatchOutputs, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    match cfg.baseline_mode {
        BaselineMode::MinMse => return min_mse_loss(tape, out),
        BaselineMode::VanillaKd => return vanilla_kd_loss(tape, out, cfg.alpha),
        BaselineMode::Ail => return ail_loss(tape, out, cfg.alpha),
        BaselineMode::Deepar => return nll_loss(tape, out),
        BaselineMode::None => {}
    }
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape, lambda: f64, term: Var| -> Result<()> {
        let weighted = tape.scale(term, lambda)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
        Ok(())
    };
    if cfg.lambda_nll > 0.0 {
        let l = nll_loss(tape, out)?;
        push(tape, cfg.lambda_nll, l)?;
    }
    if cfg.lambda_dkd > 0.0 {
        let l = dkd_loss(tape, out)?;
        push(tape, cfg.lambda_dkd, l)?;
    }
    if cfg.lambda_dist > 0.0 {
        let l = ckd_loss(tape, out, cfg.dist_metric.into())?;
        push(tape, cfg.lambda_dist, l)?;
    }
    if cfg.lambda_cosine > 0.0 {
        let l = ckd_loss(tape, out, CorrelationMetric::Cosine)?;
        push(tape, cfg.lambda_cosine, l)?;
    }
    total.ok_or_else(|| LossError::Contract("no active loss term".into()))
}
