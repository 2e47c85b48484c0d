//! Composite Simpson quadrature with interval halving.
//!
//! Used by tests as an oracle for the closed-form kernels; it never calls
//! them.

use thiserror::Error;

use super::GaussianParams;

/// Half-width of the integration window, in units of the widest sigma.
pub const SUPPORT_SIGMAS: f64 = 12.0;
pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const MAX_REFINEMENTS: u32 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("quadrature did not converge after {levels} refinements (last change {delta:e})")]
    NoConvergence { levels: u32, delta: f64 },
    #[error("invalid integration setup: {0}")]
    Setup(String),
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut odd = 0.0;
    let mut even = 0.0;
    for i in 1..n {
        let x = a + i as f64 * h;
        if i % 2 == 1 {
            odd += f(x);
        } else {
            even += f(x);
        }
    }
    h / 3.0 * (f(a) + f(b) + 4.0 * odd + 2.0 * even)
}

/// Integrate `f` over `[a, b]` starting from `initial_intervals` Simpson
/// panels and doubling until successive estimates differ by less than `tol`.
pub fn composite_simpson(
    f: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    initial_intervals: usize,
    tol: f64,
    max_refinements: u32,
) -> Result<f64, OracleError> {
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(OracleError::Setup(format!("bad interval [{a}, {b}]")));
    }
    let mut n = initial_intervals.max(2);
    n += n % 2;
    let mut prev = simpson(&f, a, b, n);
    let mut delta = f64::INFINITY;
    for _ in 0..max_refinements {
        n *= 2;
        let next = simpson(&f, a, b, n);
        delta = (next - prev).abs();
        if delta < tol {
            return Ok(next);
        }
        prev = next;
    }
    Err(OracleError::NoConvergence {
        levels: max_refinements,
        delta,
    })
}

/// Integrate `f` over `[min μ − 12·max σ, max μ + 12·max σ]` of the given
/// distributions, starting with panels no wider than the narrowest sigma.
pub fn integrate_over_support(
    f: impl Fn(f64) -> f64,
    dists: &[GaussianParams],
) -> Result<f64, OracleError> {
    if dists.is_empty() {
        return Err(OracleError::Setup("no distributions to bound the support".into()));
    }
    let min_mu = dists.iter().map(|d| d.mu()).fold(f64::INFINITY, f64::min);
    let max_mu = dists.iter().map(|d| d.mu()).fold(f64::NEG_INFINITY, f64::max);
    let max_sigma = dists.iter().map(|d| d.sigma()).fold(0.0, f64::max);
    let min_sigma = dists.iter().map(|d| d.sigma()).fold(f64::INFINITY, f64::min);
    let a = min_mu - SUPPORT_SIGMAS * max_sigma;
    let b = max_mu + SUPPORT_SIGMAS * max_sigma;
    let n = ((b - a) / min_sigma).ceil() as usize;
    composite_simpson(f, a, b, n, DEFAULT_TOLERANCE, MAX_REFINEMENTS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomial_exactly() {
        let v = composite_simpson(|x| x * x * x - x, 0.0, 2.0, 2, 1e-12, 4).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_has_unit_mass() {
        let n = GaussianParams::new(0.0, 1.0).unwrap();
        let v = integrate_over_support(|x| n.density(x), &[n]).unwrap();
        assert!((v - 1.0).abs() < 1e-8);
    }

    #[test]
    fn reports_non_convergence() {
        let err = composite_simpson(|x| (1e4 * x).sin().abs(), 0.0, 1.0, 2, 1e-300, 3).unwrap_err();
        assert!(matches!(err, OracleError::NoConvergence { levels: 3, .. }));
    }
}
