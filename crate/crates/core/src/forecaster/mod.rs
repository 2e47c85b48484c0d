//! Transformer-encoder forecaster with a Gaussian output head.
//!
//! A window `[batch, window_len, feature_dim]` is projected to `model_dim`,
//! offset by sinusoidal position codes and passed through post-norm encoder
//! layers. The encoding at the final time step feeds two affine heads:
//! `mu = w_mu·h + b_mu` and `sigma = softplus(w_sigma·h + b_sigma) + floor`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::tape::GaussianVars;
use crate::gaussian::GaussianParams;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const FEATURE_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum ForecasterError {
    #[error("invalid forecaster config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ForecasterError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub window_len: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
}

fn default_feature_dim() -> usize {
    FEATURE_DIM
}

fn default_sigma_floor() -> f64 {
    1e-4
}

impl ForecasterConfig {
    /// Full-size student: one layer, 200 hidden units, 8 heads.
    pub fn student() -> Self {
        Self {
            num_layers: 1,
            model_dim: 200,
            num_heads: 8,
            ffn_dim: 256,
            window_len: 20,
            feature_dim: FEATURE_DIM,
            sigma_floor: 1e-4,
        }
    }

    /// Full-size teacher: identical to the student apart from six layers.
    pub fn teacher() -> Self {
        Self {
            num_layers: 6,
            ..Self::student()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForecasterError::Config(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be positive");
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return bad("model_dim, num_heads and ffn_dim must be positive");
        }
        if self.model_dim % self.num_heads != 0 {
            return bad("model_dim must be divisible by num_heads");
        }
        if self.window_len == 0 {
            return bad("window_len must be positive");
        }
        if self.feature_dim != FEATURE_DIM {
            return bad("feature_dim must be 5 (open, close, low, high, volume)");
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return bad("sigma_floor must be a positive real");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

const PER_LAYER: usize = 16;
const HEAD: usize = 4;

fn param_specs(cfg: &ForecasterConfig) -> Vec<ParamSpec> {
    let (d, f) = (cfg.model_dim, cfg.ffn_dim);
    let spec = |name: String, shape: Vec<usize>, init| ParamSpec { name, shape, init };
    let mut out = vec![
        spec("input.w".into(), vec![cfg.feature_dim, d], Init::Uniform { fan_in: cfg.feature_dim }),
        spec("input.b".into(), vec![d], Init::Uniform { fan_in: cfg.feature_dim }),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        for proj in ["q", "k", "v", "o"] {
            out.push(spec(p(&format!("attn.w{proj}")), vec![d, d], Init::Uniform { fan_in: d }));
            out.push(spec(p(&format!("attn.b{proj}")), vec![d], Init::Uniform { fan_in: d }));
        }
        out.push(spec(p("ln1.gain"), vec![d], Init::Ones));
        out.push(spec(p("ln1.bias"), vec![d], Init::Zeros));
        out.push(spec(p("ffn.w1"), vec![d, f], Init::Uniform { fan_in: d }));
        out.push(spec(p("ffn.b1"), vec![f], Init::Uniform { fan_in: d }));
        out.push(spec(p("ffn.w2"), vec![f, d], Init::Uniform { fan_in: f }));
        out.push(spec(p("ffn.b2"), vec![d], Init::Uniform { fan_in: f }));
        out.push(spec(p("ln2.gain"), vec![d], Init::Ones));
        out.push(spec(p("ln2.bias"), vec![d], Init::Zeros));
    }
    out.push(spec("head.w_mu".into(), vec![d, 1], Init::Uniform { fan_in: d }));
    out.push(spec("head.b_mu".into(), vec![1], Init::Zeros));
    out.push(spec("head.w_sigma".into(), vec![d, 1], Init::Uniform { fan_in: d }));
    out.push(spec("head.b_sigma".into(), vec![1], Init::Zeros));
    out
}

/// Parameter count of a configuration, without building the model.
pub fn parameter_count(cfg: &ForecasterConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Sinusoidal position codes, `[window_len, model_dim]` row-major.
fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 / rate;
            pe[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Mean and standard deviation nodes, both `[batch]`.
#[derive(Debug, Clone, Copy)]
pub struct ForecastVars {
    pub mu: Var,
    pub sigma: Var,
}

impl From<ForecastVars> for GaussianVars {
    fn from(f: ForecastVars) -> Self {
        GaussianVars {
            mu: f.mu,
            sigma: f.sigma,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForecasterModel {
    config: ForecasterConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    pe: Vec<f64>,
}

impl ForecasterModel {
    /// Affine weights and biases are drawn from `U(±1/√fan_in)`; head biases
    /// start at zero and layer-norm gains at one.
    pub fn new(config: ForecasterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for s in param_specs(&config) {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(s.name);
            params.push(Tensor::parameter(s.shape, data)?);
        }
        let pe = positional_encoding(config.window_len, config.model_dim);
        Ok(Self {
            config,
            names,
            params,
            pe,
        })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Parameter values, for best-checkpoint snapshots.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(ForecasterError::Format("snapshot has the wrong tensor count".into()));
        }
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.assign(s)?;
        }
        Ok(())
    }

    /// Zero the output head, so every prediction is `N(0, softplus(0) + floor)`.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - HEAD..] {
            let zeros = vec![0.0; p.numel()];
            p.assign(&zeros).expect("finite zeros");
        }
    }

    /// Record the parameters on `tape`; differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p)
                } else {
                    tape.constant_tensor(p)
                }
            })
            .collect()
    }

    /// Add the gradients of `bound` (from [`bind`](Self::bind)) into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &[Var]) -> Result<()> {
        for (v, p) in bound.iter().zip(&mut self.params) {
            tape.accumulate_grad(*v, p)?;
        }
        Ok(())
    }

    fn check_window(&self, tape: &Tape, window: Var) -> Result<usize> {
        let s = tape.shape(window);
        let c = &self.config;
        if s.len() != 3 || s[1] != c.window_len || s[2] != c.feature_dim || s[0] == 0 {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!(
                    "window of shape {s:?}, expected [batch, {}, {}]",
                    c.window_len, c.feature_dim
                ),
            }
            .into());
        }
        Ok(s[0])
    }

    /// Per-sample encodings `[batch, model_dim]`, taken at the last time step.
    pub fn encode(&self, tape: &mut Tape, bound: &[Var], window: Var) -> Result<Var> {
        let batch = self.check_window(tape, window)?;
        let c = &self.config;
        let (t_len, d) = (c.window_len, c.model_dim);
        let flat = tape.reshape(window, vec![batch * t_len, c.feature_dim])?;
        let proj = tape.matmul(flat, bound[0])?;
        let proj = tape.add_row(proj, bound[1])?;
        let mut pe = Vec::with_capacity(batch * t_len * d);
        for _ in 0..batch {
            pe.extend_from_slice(&self.pe);
        }
        let pe = tape.constant(vec![batch * t_len, d], pe)?;
        let mut x = tape.add(proj, pe)?;
        for l in 0..c.num_layers {
            let p = &bound[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let last = l + 1 == c.num_layers;
            x = self.encoder_layer(tape, p, x, batch, last)?;
        }
        Ok(x)
    }

    /// One post-norm encoder layer over `x: [batch·T, D]`. In the final layer
    /// only the last time step is queried, since no other position is read.
    fn encoder_layer(&self, tape: &mut Tape, p: &[Var], x: Var, batch: usize, last: bool) -> Result<Var> {
        let c = &self.config;
        let (t_len, d, h) = (c.window_len, c.model_dim, c.num_heads);
        let dh = d / h;
        let q_len = if last { 1 } else { t_len };
        let q_src = if last {
            let rows: Vec<usize> = (0..batch).map(|b| b * t_len + t_len - 1).collect();
            tape.gather_rows(x, &rows)?
        } else {
            x
        };

        let affine = |tape: &mut Tape, input: Var, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul(input, w)?;
            Ok(tape.add_row(y, b)?)
        };
        let split = |tape: &mut Tape, v: Var, len: usize| -> Result<Var> {
            let v = tape.reshape(v, vec![batch, len, h, dh])?;
            let v = tape.permute(v, &[0, 2, 1, 3])?;
            Ok(tape.reshape(v, vec![batch * h, len, dh])?)
        };

        let q = affine(tape, q_src, p[0], p[1])?;
        let k = affine(tape, x, p[2], p[3])?;
        let v = affine(tape, x, p[4], p[5])?;
        let q = split(tape, q, q_len)?;
        let k = split(tape, k, t_len)?;
        let v = split(tape, v, t_len)?;

        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let ctx = tape.batch_matmul(attn, v, false)?;
        let ctx = tape.reshape(ctx, vec![batch, h, q_len, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, vec![batch * q_len, d])?;
        let attn_out = affine(tape, ctx, p[6], p[7])?;

        let res = tape.add(q_src, attn_out)?;
        let norm = tape.layer_norm(res)?;
        let norm = tape.mul_row(norm, p[8])?;
        let h1 = tape.add_row(norm, p[9])?;

        let hidden = affine(tape, h1, p[10], p[11])?;
        let hidden = tape.gelu(hidden)?;
        let ffn = affine(tape, hidden, p[12], p[13])?;
        let res = tape.add(h1, ffn)?;
        let norm = tape.layer_norm(res)?;
        let norm = tape.mul_row(norm, p[14])?;
        Ok(tape.add_row(norm, p[15])?)
    }

    /// Gaussian parameters for each window in the batch.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], window: Var) -> Result<ForecastVars> {
        let h = self.encode(tape, bound, window)?;
        let n = bound.len();
        let batch = tape.shape(h)[0];
        let mu = tape.matmul(h, bound[n - 4])?;
        let mu = tape.add_row(mu, bound[n - 3])?;
        let mu = tape.reshape(mu, vec![batch])?;
        let s = tape.matmul(h, bound[n - 2])?;
        let s = tape.add_row(s, bound[n - 1])?;
        let s = tape.softplus(s)?;
        let s = tape.offset(s, self.config.sigma_floor)?;
        let sigma = tape.reshape(s, vec![batch])?;
        Ok(ForecastVars { mu, sigma })
    }

    /// Inference on flattened windows (`batch · window_len · feature_dim`
    /// values): returns `(mu, sigma)` per window.
    pub fn predict(&self, windows: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = &self.config;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let w = tape.constant(vec![batch, c.window_len, c.feature_dim], windows.to_vec())?;
        let out = self.forward(&mut tape, &bound, w)?;
        Ok((tape.value(out.mu).to_vec(), tape.value(out.sigma).to_vec()))
    }

    pub fn predict_distribution(&self, window: &Tensor) -> Result<Vec<GaussianParams>> {
        let batch = window.shape().first().copied().unwrap_or(0);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let w = tape.constant_tensor(window);
        self.check_window(&tape, w)?;
        let out = self.forward(&mut tape, &bound, w)?;
        (0..batch)
            .map(|i| {
                GaussianParams::new(tape.value(out.mu)[i], tape.value(out.sigma)[i])
                    .map_err(|e| ForecasterError::Format(e.to_string()))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<checkpoint::Manifest> {
        let named: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.params).collect();
        let meta = serde_json::json!({
            "forecaster_config": self.config,
            "parameter_count": self.parameter_count(),
        });
        Ok(checkpoint::save(dir, &named, meta)?)
    }

    /// Load a checkpoint using the configuration recorded in its manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(dir)?;
        let cfg: ForecasterConfig = serde_json::from_value(
            manifest
                .metadata
                .get("forecaster_config")
                .cloned()
                .ok_or_else(|| ForecasterError::Format("manifest has no forecaster_config".into()))?,
        )
        .map_err(|e| ForecasterError::Format(format!("forecaster_config: {e}")))?;
        Self::load_with_config(dir, cfg)
    }

    /// Load a checkpoint, validating every tensor against `config`.
    pub fn load_with_config(dir: &Path, config: ForecasterConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let (_, tensors) = checkpoint::load(dir)?;
        for (name, _) in &tensors {
            if !model.names.contains(name) {
                return Err(ForecasterError::Format(format!(
                    "unexpected tensor `{name}` for this configuration"
                )));
            }
        }
        for (name, param) in model.names.iter().zip(&mut model.params) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| ForecasterError::Format(format!("missing tensor `{name}`")))?;
            if t.shape() != param.shape() {
                return Err(ForecasterError::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    param.shape()
                )));
            }
            param.assign(t.data())?;
        }
        Ok(model)
    }
}
