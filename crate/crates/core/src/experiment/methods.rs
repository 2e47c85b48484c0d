use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{BaselineMode, LossConfig};

/// Every row label that can appear in a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Teacher,
    Sma,
    Ema,
    MinMse,
    DeepAr,
    VanillaKd,
    Ail,
    Dkd,
    DkdDist,
    DkdCosine,
    DkdBoth,
    OnlyDist,
    OnlyCosine,
}

/// Which correlational weights a method searches over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    None,
    Dist,
    Cosine,
    Both,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Teacher,
        Method::Sma,
        Method::Ema,
        Method::MinMse,
        Method::DeepAr,
        Method::VanillaKd,
        Method::Ail,
        Method::Dkd,
        Method::DkdDist,
        Method::DkdCosine,
        Method::DkdBoth,
        Method::OnlyDist,
        Method::OnlyCosine,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Teacher => "Teacher",
            Method::Sma => "SMA",
            Method::Ema => "EMA",
            Method::MinMse => "Min-MSE",
            Method::DeepAr => "DeepAR",
            Method::VanillaKd => "Vanilla KD",
            Method::Ail => "AIL",
            Method::Dkd => "DKD",
            Method::DkdDist => "DKD+Dist-CKD",
            Method::DkdCosine => "DKD+Cosine-CKD",
            Method::DkdBoth => "DKD+both",
            Method::OnlyDist => "only-Dist-CKD",
            Method::OnlyCosine => "only-Cosine-CKD",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Teacher => "teacher",
            Method::Sma => "sma",
            Method::Ema => "ema",
            Method::MinMse => "min_mse",
            Method::DeepAr => "deep_ar",
            Method::VanillaKd => "vanilla_kd",
            Method::Ail => "ail",
            Method::Dkd => "dkd",
            Method::DkdDist => "dkd_dist",
            Method::DkdCosine => "dkd_cosine",
            Method::DkdBoth => "dkd_both",
            Method::OnlyDist => "only_dist",
            Method::OnlyCosine => "only_cosine",
        }
    }

    /// A student trained by gradient descent (not the teacher or a moving average).
    pub fn is_student(self) -> bool {
        !matches!(self, Method::Teacher | Method::Sma | Method::Ema)
    }

    pub fn grid(self) -> Grid {
        match self {
            Method::DkdDist | Method::OnlyDist => Grid::Dist,
            Method::DkdCosine | Method::OnlyCosine => Grid::Cosine,
            Method::DkdBoth => Grid::Both,
            _ => Grid::None,
        }
    }

    /// The teacher-free method a distilled student is measured against.
    pub fn counterpart(self) -> Option<Method> {
        match self {
            Method::VanillaKd | Method::Ail => Some(Method::MinMse),
            Method::Dkd | Method::DkdDist | Method::DkdCosine | Method::DkdBoth => Some(Method::DeepAr),
            Method::OnlyDist | Method::OnlyCosine => Some(Method::DeepAr),
            _ => None,
        }
    }

    /// Training objective, starting from the configured NLL/DKD weights,
    /// distance metric and imitation weight in `base`.
    pub fn loss_config(self, base: &LossConfig, lambda_dist: f64, lambda_cosine: f64) -> LossConfig {
        let mode = |baseline_mode| LossConfig {
            baseline_mode,
            ..base.clone()
        };
        let distributional = |dkd: f64, dist: f64, cosine: f64| LossConfig {
            lambda_dkd: dkd,
            lambda_dist: dist,
            lambda_cosine: cosine,
            baseline_mode: BaselineMode::None,
            ..base.clone()
        };
        match self {
            Method::MinMse | Method::Teacher | Method::Sma | Method::Ema => mode(BaselineMode::MinMse),
            Method::DeepAr => mode(BaselineMode::Deepar),
            Method::VanillaKd => mode(BaselineMode::VanillaKd),
            Method::Ail => mode(BaselineMode::Ail),
            Method::Dkd => distributional(base.lambda_dkd, 0.0, 0.0),
            Method::DkdDist => distributional(base.lambda_dkd, lambda_dist, 0.0),
            Method::DkdCosine => distributional(base.lambda_dkd, 0.0, lambda_cosine),
            Method::DkdBoth => distributional(base.lambda_dkd, lambda_dist, lambda_cosine),
            Method::OnlyDist => distributional(0.0, lambda_dist, 0.0),
            Method::OnlyCosine => distributional(0.0, 0.0, lambda_cosine),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = String;

    /// Accepts either the report label or the snake_case key.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s) || m.key() == s)
            .ok_or_else(|| {
                let keys: Vec<&str> = Method::ALL.iter().map(|m| m.key()).collect();
                format!("unknown method `{s}`; expected one of {}", keys.join(", "))
            })
    }
}
