//! Differentiable batched versions of the Gaussian kernels.
//!
//! Each function mirrors the floating-point expression order of its scalar
//! counterpart, so values agree bit-for-bit with the scalar kernels.

use std::f64::consts::PI;

use super::CorrelationMetric;
use crate::tensor::{Result, Tape, TensorError, Var};

/// A batch of Gaussians as two `[m]` tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    pub fn len(&self, tape: &Tape) -> usize {
        tape.value(self.mu).len()
    }

    pub fn is_empty(&self, tape: &Tape) -> bool {
        self.len(tape) == 0
    }

    pub fn constant(tape: &mut Tape, mu: &[f64], sigma: &[f64]) -> Result<Self> {
        Ok(Self {
            mu: tape.constant(vec![mu.len()], mu.to_vec())?,
            sigma: tape.constant(vec![sigma.len()], sigma.to_vec())?,
        })
    }

    fn check(&self, tape: &Tape) -> Result<usize> {
        let (a, b) = (tape.shape(self.mu), tape.shape(self.sigma));
        if a.len() != 1 || a != b {
            return Err(TensorError::Shape {
                op: "gaussian batch",
                detail: format!("mu {a:?} and sigma {b:?} must be equal-length vectors"),
            });
        }
        Ok(a[0])
    }
}

/// Elementwise `log p(y | mu, sigma)`.
pub fn log_likelihood(tape: &mut Tape, y: Var, g: GaussianVars) -> Result<Var> {
    g.check(tape)?;
    let s2 = tape.square(g.sigma)?;
    let norm = tape.scale(s2, 2.0 * PI)?;
    let log_norm = tape.log(norm)?;
    let half_log_norm = tape.scale(log_norm, -0.5)?;
    let z = tape.sub(y, g.mu)?;
    let z2 = tape.square(z)?;
    let den = tape.scale(s2, 2.0)?;
    let quad = tape.div(z2, den)?;
    tape.sub(half_log_norm, quad)
}

/// Elementwise `KL(p ‖ q)` for operands of equal shape.
pub fn kl_divergence(
    tape: &mut Tape,
    p_mu: Var,
    p_sigma: Var,
    q_mu: Var,
    q_sigma: Var,
) -> Result<Var> {
    let ratio = tape.div(q_sigma, p_sigma)?;
    let log_ratio = tape.log(ratio)?;
    let d = tape.sub(p_mu, q_mu)?;
    let d2 = tape.square(d)?;
    let ps2 = tape.square(p_sigma)?;
    let num = tape.add(ps2, d2)?;
    let qs2 = tape.square(q_sigma)?;
    let den = tape.scale(qs2, 2.0)?;
    let frac = tape.div(num, den)?;
    let sum = tape.add(log_ratio, frac)?;
    tape.offset(sum, -0.5)
}

/// `[m, m]` matrix with entry `(i, j) = φ(Nᵢ, Nⱼ)`.
pub fn correlation_matrix(tape: &mut Tape, g: GaussianVars, metric: CorrelationMetric) -> Result<Var> {
    let m = g.check(tape)?;
    if m == 0 {
        return Err(TensorError::Contract("correlation matrix of an empty batch".into()));
    }
    let mu_i = tape.tile_cols(g.mu, m)?;
    let mu_j = tape.tile_rows(g.mu, m)?;
    let s_i = tape.tile_cols(g.sigma, m)?;
    let s_j = tape.tile_rows(g.sigma, m)?;
    match metric {
        CorrelationMetric::DistPaper => {
            let si2 = tape.square(s_i)?;
            let sj2 = tape.square(s_j)?;
            let inv_i = tape.recip(si2)?;
            let inv_j = tape.recip(sj2)?;
            let inv_sum = tape.add(inv_i, inv_j)?;
            let half = tape.scale(inv_sum, 0.5)?;
            let ds = tape.sub(s_i, s_j)?;
            let ds2 = tape.square(ds)?;
            let dm = tape.sub(mu_i, mu_j)?;
            let dm2 = tape.square(dm)?;
            let dist = tape.add(ds2, dm2)?;
            tape.mul(half, dist)
        }
        CorrelationMetric::JeffreysExact => {
            let ij = kl_divergence(tape, mu_i, s_i, mu_j, s_j)?;
            let ji = kl_divergence(tape, mu_j, s_j, mu_i, s_i)?;
            let sum = tape.add(ij, ji)?;
            tape.scale(sum, 0.5)
        }
        CorrelationMetric::Cosine => {
            let si2 = tape.square(s_i)?;
            let sj2 = tape.square(s_j)?;
            let s2 = tape.add(si2, sj2)?;
            let prod = tape.mul(s_i, s_j)?;
            let num = tape.scale(prod, 2.0)?;
            let ratio = tape.div(num, s2)?;
            let root = tape.sqrt(ratio)?;
            let dm = tape.sub(mu_i, mu_j)?;
            let dm2 = tape.square(dm)?;
            let neg = tape.neg(dm2)?;
            let den = tape.scale(s2, 2.0)?;
            let arg = tape.div(neg, den)?;
            let e = tape.exp(arg)?;
            tape.mul(root, e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{self, GaussianParams};
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const METRICS: [CorrelationMetric; 3] = [
        CorrelationMetric::DistPaper,
        CorrelationMetric::JeffreysExact,
        CorrelationMetric::Cosine,
    ];

    fn batch(rng: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<f64>) {
        (
            (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..m).map(|_| rng.random_range(0.2..2.0)).collect(),
        )
    }

    #[test]
    fn tape_kernels_match_scalar_kernels_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mu, sigma) = batch(&mut rng, 5);
        let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dists: Vec<GaussianParams> = mu
            .iter()
            .zip(&sigma)
            .map(|(&m, &s)| GaussianParams::new(m, s).unwrap())
            .collect();

        let mut t = Tape::new();
        let g = GaussianVars::constant(&mut t, &mu, &sigma).unwrap();
        let y = t.constant(vec![5], ys.clone()).unwrap();
        let ll = log_likelihood(&mut t, y, g).unwrap();
        for i in 0..5 {
            assert_eq!(t.value(ll)[i], gaussian::log_likelihood(ys[i], &dists[i]));
        }
        for metric in METRICS {
            let c = correlation_matrix(&mut t, g, metric).unwrap();
            let expect = gaussian::correlation_matrix(&dists, metric).unwrap();
            assert_eq!(t.value(c), expect.entries(), "{metric:?}");
        }
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (mu, sigma) = batch(&mut rng, 4);
            let (mu2, sigma2) = batch(&mut rng, 4);
            let params = vec![
                Tensor::parameter(vec![4], mu).unwrap(),
                Tensor::parameter(vec![4], sigma).unwrap(),
                Tensor::parameter(vec![4], mu2).unwrap(),
                Tensor::parameter(vec![4], sigma2).unwrap(),
            ];
            let r = check_gradients(&params, GradCheck::default(), |t, v| {
                let kl = kl_divergence(t, v[0], v[1], v[2], v[3])?;
                t.sum(kl)
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "kl {r:?}");
            for metric in METRICS {
                let r = check_gradients(&params[..2], GradCheck::default(), |t, v| {
                    let c = correlation_matrix(t, GaussianVars { mu: v[0], sigma: v[1] }, metric)?;
                    let w = t.constant(vec![4, 4], (0..16).map(|k| (k as f64 * 0.37).sin()).collect())?;
                    let p = t.mul(c, w)?;
                    t.sum(p)
                })
                .unwrap();
                assert!(r.max_rel_error < 1e-4, "{metric:?} {r:?}");
            }
        }
    }
}
