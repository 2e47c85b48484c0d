//! Closed-form mathematics of univariate Gaussians.
//!
//! Scalar kernels live here; [`tape`] re-expresses them over batches of
//! tape nodes so they can be differentiated, and [`quadrature`] provides
//! the numerical-integration oracle the closed forms are checked against.

pub mod quadrature;
pub mod tape;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("invalid Gaussian: mu = {mu}, sigma = {sigma} (sigma must be finite and > 0)")]
    Invalid { mu: f64, sigma: f64 },
    #[error("contract violated: {0}")]
    Contract(String),
}

/// A univariate normal distribution `N(mu, sigma²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mu: f64,
    sigma: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, GaussianError> {
        if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
            return Err(GaussianError::Invalid { mu, sigma });
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn log_density(&self, y: f64) -> f64 {
        log_likelihood(y, self)
    }

    pub fn density(&self, y: f64) -> f64 {
        log_likelihood(y, self).exp()
    }
}

/// `log p(y | mu, sigma)`.
pub fn log_likelihood(y: f64, p: &GaussianParams) -> f64 {
    let z = y - p.mu;
    let s2 = p.sigma * p.sigma;
    -0.5 * (2.0 * PI * s2).ln() - z * z / (2.0 * s2)
}

/// `KL(p ‖ q)`.
pub fn kl_divergence(p: &GaussianParams, q: &GaussianParams) -> f64 {
    let d = p.mu - q.mu;
    (q.sigma / p.sigma).ln() + (p.sigma * p.sigma + d * d) / (2.0 * q.sigma * q.sigma) - 0.5
}

/// Distance correlation in its commonly published closed form,
/// `½(1/σᵢ² + 1/σⱼ²)((σᵢ−σⱼ)² + (μᵢ−μⱼ)²)`.
///
/// This is not the symmetrized KL: at equal unit sigmas and a unit mean gap
/// it gives 1.0 where [`jeffreys_exact`] gives 0.5.
pub fn dist_correlation_paper(p: &GaussianParams, q: &GaussianParams) -> f64 {
    let ds = p.sigma - q.sigma;
    let dm = p.mu - q.mu;
    0.5 * (1.0 / (p.sigma * p.sigma) + 1.0 / (q.sigma * q.sigma)) * (ds * ds + dm * dm)
}

/// Symmetrized KL, `½(KL(p‖q) + KL(q‖p))`.
pub fn jeffreys_exact(p: &GaussianParams, q: &GaussianParams) -> f64 {
    0.5 * (kl_divergence(p, q) + kl_divergence(q, p))
}

/// `∫ p(t) q(t) dt`.
pub fn inner_product(p: &GaussianParams, q: &GaussianParams) -> f64 {
    let s2 = p.sigma * p.sigma + q.sigma * q.sigma;
    let dm = p.mu - q.mu;
    (2.0 * PI * s2).sqrt().recip() * (-(dm * dm) / (2.0 * s2)).exp()
}

/// Cosine of the angle between two densities under the L² inner product.
pub fn cosine_correlation(p: &GaussianParams, q: &GaussianParams) -> f64 {
    let s2 = p.sigma * p.sigma + q.sigma * q.sigma;
    let dm = p.mu - q.mu;
    (2.0 * (p.sigma * q.sigma) / s2).sqrt() * (-(dm * dm) / (2.0 * s2)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMetric {
    DistPaper,
    JeffreysExact,
    Cosine,
}

impl CorrelationMetric {
    pub fn eval(self, p: &GaussianParams, q: &GaussianParams) -> f64 {
        match self {
            CorrelationMetric::DistPaper => dist_correlation_paper(p, q),
            CorrelationMetric::JeffreysExact => jeffreys_exact(p, q),
            CorrelationMetric::Cosine => cosine_correlation(p, q),
        }
    }
}

/// Pairwise correlations `C[i][j] = φ(Nᵢ, Nⱼ)` of a batch, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    m: usize,
    entries: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

pub fn correlation_matrix(
    batch: &[GaussianParams],
    metric: CorrelationMetric,
) -> Result<CorrelationMatrix, GaussianError> {
    if batch.is_empty() {
        return Err(GaussianError::Contract(
            "correlation matrix of an empty batch".into(),
        ));
    }
    let m = batch.len();
    let mut entries = Vec::with_capacity(m * m);
    for p in batch {
        for q in batch {
            entries.push(metric.eval(p, q));
        }
    }
    Ok(CorrelationMatrix { m, entries })
}
