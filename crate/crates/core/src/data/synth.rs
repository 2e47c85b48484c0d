//! Seeded synthetic OHLCV generator.
//!
//! Per symbol, log-volume is `level + season[slot] + u_t + coupling·h_t` where
//! `u_t` is AR(1) and `h_t` is a persistent log-volatility state that also
//! scales price moves and the volume innovations. Prices follow a geometric
//! random walk. Trading days are weekdays with `slots_per_day` hourly bars.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::OhlcvRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub slots_per_day: usize,
    pub first_hour: u32,
    /// First trading day, `YYYY-MM-DD`.
    pub start_date: String,
    pub ar_coef: f64,
    pub noise_std: f64,
    pub seasonal_amplitude: f64,
    pub level_mean: f64,
    pub level_std: f64,
    pub price_vol: f64,
    pub vol_persistence: f64,
    pub vol_of_vol: f64,
    /// Loading of log-volume on the volatility state.
    pub volume_vol_coupling: f64,
    /// Exponent scaling volume innovations with the volatility state.
    pub noise_vol_coupling: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            slots_per_day: 5,
            first_hour: 9,
            start_date: "2015-01-05".into(),
            ar_coef: 0.7,
            noise_std: 0.35,
            seasonal_amplitude: 0.5,
            level_mean: 10.0,
            level_std: 1.0,
            price_vol: 0.01,
            vol_persistence: 0.97,
            vol_of_vol: 0.15,
            volume_vol_coupling: 0.8,
            noise_vol_coupling: 0.8,
        }
    }
}

impl SynthConfig {
    fn start(&self) -> NaiveDate {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .unwrap_or_else(|_| NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date"))
    }
}

fn trading_timestamps(cfg: &SynthConfig, n: usize) -> Vec<NaiveDateTime> {
    let mut out = Vec::with_capacity(n);
    let mut day = cfg.start();
    while out.len() < n {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            for k in 0..cfg.slots_per_day {
                if out.len() == n {
                    break;
                }
                let hour = cfg.first_hour + k as u32;
                out.push(day.and_hms_opt(hour % 24, 0, 0).expect("valid hour"));
            }
        }
        day += Duration::days(1);
    }
    out
}

pub fn synth_generate(num_symbols: usize, num_slots: usize, seed: u64) -> Vec<OhlcvRecord> {
    synth_generate_with(&SynthConfig::default(), num_symbols, num_slots, seed)
}

/// Records for `num_symbols` symbols (`S000`, `S001`, ...) over `num_slots`
/// trading slots each, grouped by symbol and time-ordered.
pub fn synth_generate_with(cfg: &SynthConfig, num_symbols: usize, num_slots: usize, seed: u64) -> Vec<OhlcvRecord> {
    let times = trading_timestamps(cfg, num_slots);
    let slots = cfg.slots_per_day.max(1);
    let mut out = Vec::with_capacity(num_symbols * num_slots);
    for s in 0..num_symbols {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64 + 1);
        let level = Normal::new(cfg.level_mean, cfg.level_std.max(0.0))
            .expect("finite level")
            .sample(&mut rng);
        let season: Vec<f64> = (0..slots)
            .map(|k| {
                let base = (2.0 * std::f64::consts::PI * k as f64 / slots as f64).cos();
                let jitter: f64 = rng.sample(StandardNormal);
                cfg.seasonal_amplitude * (base + 0.2 * jitter)
            })
            .collect();
        let mut price = (50f64.ln() + rng.sample::<f64, _>(StandardNormal)).exp();
        let mut u = 0.0;
        let mut h = 0.0;
        for (t, ts) in times.iter().enumerate() {
            let z: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
            h = cfg.vol_persistence * h + cfg.vol_of_vol * z[0];
            u = cfg.ar_coef * u + cfg.noise_std * (cfg.noise_vol_coupling * h).exp() * z[1];
            let log_volume = level + season[t % slots] + u + cfg.volume_vol_coupling * h;

            let sigma = cfg.price_vol * h.exp();
            let open = price * (0.3 * sigma * z[2]).exp();
            let close = open * (sigma * z[3]).exp();
            let high = open.max(close) * (0.5 * sigma * z[4].abs()).exp();
            let low = open.min(close) * (-0.5 * sigma * z[5].abs()).exp();
            price = close;
            out.push(OhlcvRecord {
                symbol: format!("S{s:03}"),
                timestamp: *ts,
                open,
                high,
                low,
                close,
                volume: log_volume.exp(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(synth_generate(3, 50, 9), synth_generate(3, 50, 9));
        assert_ne!(synth_generate(3, 50, 9), synth_generate(3, 50, 10));
    }

    #[test]
    fn records_satisfy_invariants() {
        let recs = synth_generate(4, 500, 1);
        assert_eq!(recs.len(), 2000);
        assert!(recs.iter().all(|r| r.validate().is_ok()));
        for pair in recs.windows(2) {
            if pair[0].symbol == pair[1].symbol {
                assert!(pair[0].timestamp < pair[1].timestamp);
            }
        }
        assert!(recs.iter().all(|r| r.timestamp.weekday().num_days_from_monday() < 5));
    }

    #[test]
    fn lag_one_autocorrelation_matches_ar_coefficient() {
        let cfg = SynthConfig {
            volume_vol_coupling: 0.0,
            ..SynthConfig::default()
        };
        let n = 10_000;
        let recs = synth_generate_with(&cfg, 1, n, 3);
        let logv: Vec<f64> = recs.iter().map(|r| r.volume.ln()).collect();
        // remove the per-slot seasonal mean before estimating
        let k = cfg.slots_per_day;
        let mut slot_mean = vec![0.0; k];
        for (t, v) in logv.iter().enumerate() {
            slot_mean[t % k] += v / (n / k) as f64;
        }
        let x: Vec<f64> = logv.iter().enumerate().map(|(t, v)| v - slot_mean[t % k]).collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        let rho = cov / var;
        assert!((rho - cfg.ar_coef).abs() < 0.05, "lag-1 autocorrelation {rho}");
    }
}
