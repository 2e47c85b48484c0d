//! Moving-average volume baselines.

use super::{DataError, Result};

pub const SMA_PERIODS: usize = 20;
pub const EMA_RHO: f64 = 0.04;

/// Mean of the last `periods` values of `history`.
pub fn sma_predict(history: &[f64], periods: usize) -> Result<f64> {
    if periods == 0 || history.len() < periods {
        return Err(DataError::InsufficientHistory {
            needed: periods.max(1),
            have: history.len(),
        });
    }
    let tail = &history[history.len() - periods..];
    Ok(tail.iter().sum::<f64>() / periods as f64)
}

/// `y₁ = x₁`, `y_t = ρ·x_t + (1 − ρ)·y_{t−1}`; returns the final `y`.
pub fn ema_predict(history: &[f64], rho: f64) -> Result<f64> {
    let (first, rest) = history
        .split_first()
        .ok_or_else(|| DataError::Contract("EMA of an empty history".into()))?;
    Ok(rest.iter().fold(*first, |y, x| rho * x + (1.0 - rho) * y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sma_examples() {
        assert_eq!(sma_predict(&[2.0, 4.0, 6.0], 3).unwrap(), 4.0);
        assert_eq!(sma_predict(&[1.5; 20], 20).unwrap(), 1.5);
        assert!(matches!(
            sma_predict(&[1.0; 19], 20),
            Err(DataError::InsufficientHistory { needed: 20, have: 19 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut brute = 0.0;
            for x in &v[5..] {
                brute += x;
            }
            assert!((sma_predict(&v, 20).unwrap() - brute / 20.0).abs() < 1e-14);
        }
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_predict(&[0.7; 20], EMA_RHO).unwrap(), 0.7);
        assert_eq!(ema_predict(&[0.0, 1.0], 0.04).unwrap(), 0.04);
        assert_eq!(ema_predict(&[3.0, -1.0, 2.5], 1.0).unwrap(), 2.5);
        assert!(ema_predict(&[], EMA_RHO).is_err());
    }
}
