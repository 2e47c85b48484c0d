//! Declarative experiment configuration (TOML) with `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Method, Result};
use crate::data::{Resolution, SynthConfig};
use crate::distill::{DistMetric, LossConfig};
use crate::forecaster::ForecasterConfig;

pub const OUT_DIR_ENV: &str = "VOLKD_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_symbols: usize,
    pub num_slots: usize,
    pub seed: u64,
    pub process: SynthConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_symbols: 50,
            num_slots: 2000,
            seed: 0,
            process: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub csv_path: Option<PathBuf>,
    pub resolution: Resolution,
    pub window_len: usize,
    /// Explicit split boundaries (ISO-8601). When absent, boundaries fall at
    /// the given fractions of the distinct timestamps.
    pub train_end: Option<String>,
    pub val_end: Option<String>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            csv_path: None,
            resolution: Resolution::Hourly,
            window_len: 20,
            train_end: None,
            val_end: None,
            train_fraction: 0.7,
            val_fraction: 0.15,
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Shared architecture; teacher and student differ only in depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub sigma_floor: f64,
    pub teacher_layers: usize,
    pub student_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ForecasterConfig::student();
        Self {
            model_dim: s.model_dim,
            num_heads: s.num_heads,
            ffn_dim: s.ffn_dim,
            sigma_floor: s.sigma_floor,
            teacher_layers: 6,
            student_layers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub max_steps: usize,
    /// Step budget for the teacher; defaults to `max_steps`.
    pub teacher_max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            eval_interval: 1000,
            max_steps: 5000,
            teacher_max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_batch: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
    /// Search the 16-cell joint grid for DKD+both instead of reusing the
    /// best marginal values.
    pub joint_grid: bool,
    pub fractions: Vec<f64>,
    pub methods: Vec<Method>,
    /// Methods trained at every sweep fraction.
    pub sweep_methods: Vec<Method>,
    pub ern_sample: usize,
    /// Train a separate teacher for each seed rather than sharing the first.
    pub teacher_per_seed: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            seeds: (0..7).collect(),
            lambda_grid: vec![1.0, 2.0, 5.0, 10.0],
            joint_grid: false,
            fractions: (1..=10).map(|k| k as f64 / 10.0).collect(),
            methods: Method::ALL.to_vec(),
            sweep_methods: vec![
                Method::MinMse,
                Method::DeepAr,
                Method::VanillaKd,
                Method::Ail,
                Method::DkdDist,
                Method::DkdCosine,
            ],
            ern_sample: 12_000,
            teacher_per_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub save_student_checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            save_student_checkpoints: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSettings,
    pub output: OutputConfig,
}

fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML tree, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad override key `{path}`")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (or start from defaults), apply overrides, then the
    /// output-directory environment override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ExperimentError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.output.dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn forecaster(&self, num_layers: usize) -> ForecasterConfig {
        ForecasterConfig {
            num_layers,
            model_dim: self.model.model_dim,
            num_heads: self.model.num_heads,
            ffn_dim: self.model.ffn_dim,
            window_len: self.data.window_len,
            feature_dim: crate::forecaster::FEATURE_DIM,
            sigma_floor: self.model.sigma_floor,
        }
    }

    pub fn teacher_config(&self) -> ForecasterConfig {
        self.forecaster(self.model.teacher_layers)
    }

    pub fn student_config(&self) -> ForecasterConfig {
        self.forecaster(self.model.student_layers)
    }

    pub fn teacher_steps(&self) -> usize {
        self.train.teacher_max_steps.unwrap_or(self.train.max_steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_config().validate().map_err(|e| config_err(format!("teacher: {e}")))?;
        self.student_config().validate().map_err(|e| config_err(format!("student: {e}")))?;
        self.loss.validate().map_err(|e| config_err(e.to_string()))?;
        let d = &self.data;
        if d.source == DataSource::Csv && d.csv_path.is_none() {
            return Err(config_err("data.source = \"csv\" requires data.csv_path"));
        }
        if d.train_end.is_some() != d.val_end.is_some() {
            return Err(config_err("set both data.train_end and data.val_end, or neither"));
        }
        let (tf, vf) = (d.train_fraction, d.val_fraction);
        if !(tf > 0.0 && vf > 0.0 && tf + vf < 1.0) {
            return Err(config_err("need train_fraction, val_fraction > 0 with a sum below 1"));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_interval == 0 || t.max_steps == 0 || t.eval_batch == 0 {
            return Err(config_err("batch_size, eval_interval, max_steps and eval_batch must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(config_err("lr must be positive"));
        }
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(config_err("experiment.seeds must be non-empty"));
        }
        if e.lambda_grid.is_empty() || e.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(config_err("lambda_grid must be non-empty and non-negative"));
        }
        if e.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config_err("fractions must lie in (0, 1]"));
        }
        if e.ern_sample < 2 {
            return Err(config_err("ern_sample must be at least 2"));
        }
        Ok(())
    }

    /// The loss for `method` with the given correlational weights.
    pub fn loss_for(&self, method: Method, lambda_dist: f64, lambda_cosine: f64) -> LossConfig {
        method.loss_config(&self.loss, lambda_dist, lambda_cosine)
    }

    pub fn dist_metric(&self) -> DistMetric {
        self.loss.dist_metric
    }
}
