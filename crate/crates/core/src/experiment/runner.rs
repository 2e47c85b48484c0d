use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::dataset::{PreparedData, SampleSet};
use super::methods::{Grid, Method};
use super::report::{ExperimentReport, GridRow, ResultRow, TimingRow, TraceRow};
use super::train::{predict_set, train, Predictions, Selection, TrainOutcome, TrainSettings};
use super::{ExperimentError, Result};
use crate::data::{ema_predict, sma_predict, EMA_RHO, SMA_PERIODS};
use crate::distill::{BaselineMode, LossConfig};
use crate::forecaster::ForecasterModel;
use crate::metrics::{self, EvalBatch, Metrics};

const TEACHER_INIT: u64 = 1;
const TEACHER_BATCHES: u64 = 2;
const STUDENT_INIT: u64 = 3;
const STUDENT_BATCHES: u64 = 4;

/// Independent sub-seed for one purpose within an experiment seed. Every
/// student of a seed shares its initialization and batch order.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Shared inputs of every run in an experiment.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a PreparedData,
    /// Where checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl RunContext<'_> {
    fn test_metrics(&self, mu: &[f64], seed: u64) -> Result<Metrics> {
        let t = &self.data.test;
        let batch = EvalBatch::new(mu, &t.targets, &t.last_volumes)?;
        Ok(metrics::evaluate(&batch, self.cfg.experiment.ern_sample, seed)?)
    }

    fn save(&self, model: &ForecasterModel, id: &str) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            model.save(&dir.join(id))?;
        }
        Ok(())
    }
}

pub struct TeacherRun {
    pub model: ForecasterModel,
    pub outcome: TrainOutcome,
    /// Teacher predictions on the training split, reused by every student.
    pub train_predictions: Predictions,
    pub test: Metrics,
    pub checkpoint: String,
    pub seconds: f64,
}

/// Train the deep model on likelihood alone, selecting by validation NLL.
pub fn train_teacher(ctx: &RunContext, seed: u64) -> Result<TeacherRun> {
    let start = Instant::now();
    let cfg = ctx.cfg;
    let mut model = ForecasterModel::new(cfg.teacher_config(), derive_seed(seed, TEACHER_INIT))?;
    let loss = LossConfig {
        baseline_mode: BaselineMode::Deepar,
        ..cfg.loss.clone()
    };
    let settings = TrainSettings::from_config(&cfg.train, cfg.teacher_steps());
    let outcome = train(
        &mut model,
        &ctx.data.train,
        &ctx.data.validation,
        &loss,
        None,
        &settings,
        Selection::Nll,
        derive_seed(seed, TEACHER_BATCHES),
    )?;
    let train_predictions = predict_set(&model, &ctx.data.train, cfg.train.eval_batch)?;
    let test_preds = predict_set(&model, &ctx.data.test, cfg.train.eval_batch)?;
    let test = ctx.test_metrics(&test_preds.mu, seed)?;
    let checkpoint = format!("teacher_s{seed}");
    ctx.save(&model, &checkpoint)?;
    log::info!("seed {seed}: teacher test MSE {:.5} (best step {})", test.mse, outcome.best_step);
    Ok(TeacherRun {
        model,
        outcome,
        train_predictions,
        test,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub lambda_dist: f64,
    pub lambda_cosine: f64,
}

impl GridCell {
    pub const NONE: GridCell = GridCell {
        lambda_dist: 0.0,
        lambda_cosine: 0.0,
    };
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub method: Method,
    pub fraction: f64,
    pub cell: GridCell,
    pub test: Metrics,
    pub val_mse: f64,
    pub outcome: TrainOutcome,
    pub checkpoint: String,
    pub seconds: f64,
}

/// Number of training samples kept at `fraction`: the earliest `⌈f·n⌉`.
fn prefix_len(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).min(n)
}

/// Train one student on the earliest `fraction` of the training split.
/// Objectives that do not read the teacher never see it.
pub fn distill_student(
    ctx: &RunContext,
    teacher: Option<&Predictions>,
    method: Method,
    cell: GridCell,
    fraction: f64,
    seed: u64,
) -> Result<StudentRun> {
    if !method.is_student() {
        return Err(ExperimentError::Config(format!("{method} is not a trainable student")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ExperimentError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let start = Instant::now();
    let cfg = ctx.cfg;
    let loss = cfg.loss_for(method, cell.lambda_dist, cell.lambda_cosine);
    let n = prefix_len(ctx.data.train.len(), fraction);
    let train_set: Cow<SampleSet> = if n == ctx.data.train.len() {
        Cow::Borrowed(&ctx.data.train)
    } else {
        Cow::Owned(ctx.data.train.prefix(n))
    };
    let teacher: Option<Predictions> = match (loss.needs_teacher(), teacher) {
        (false, _) => None,
        (true, None) => return Err(ExperimentError::Config(format!("{method} needs a teacher"))),
        (true, Some(t)) => Some(Predictions {
            mu: t.mu[..n].to_vec(),
            sigma: t.sigma[..n].to_vec(),
        }),
    };
    let mut model = ForecasterModel::new(cfg.student_config(), derive_seed(seed, STUDENT_INIT))?;
    let settings = TrainSettings::from_config(&cfg.train, cfg.train.max_steps);
    let outcome = train(
        &mut model,
        &train_set,
        &ctx.data.validation,
        &loss,
        teacher.as_ref(),
        &settings,
        Selection::Mse,
        derive_seed(seed, STUDENT_BATCHES),
    )?;
    let preds = predict_set(&model, &ctx.data.test, cfg.train.eval_batch)?;
    let test = ctx.test_metrics(&preds.mu, seed)?;
    let checkpoint = format!(
        "s{seed}_{}_f{fraction}_ld{}_lc{}",
        method.key(),
        cell.lambda_dist,
        cell.lambda_cosine
    );
    if cfg.output.save_student_checkpoints {
        ctx.save(&model, &checkpoint)?;
    }
    log::info!(
        "seed {seed}: {method} (fraction {fraction}, λ_dist {}, λ_cos {}) test MSE {:.5}",
        cell.lambda_dist,
        cell.lambda_cosine,
        test.mse
    );
    Ok(StudentRun {
        method,
        fraction,
        cell,
        test,
        val_mse: outcome.best_score,
        outcome,
        checkpoint,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Cells searched for `method`. Joint searches cover the full product grid;
/// otherwise DKD+both uses the supplied marginal winners.
pub fn grid_cells(method: Method, lambdas: &[f64], joint: bool, marginal: Option<GridCell>) -> Vec<GridCell> {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    match method.grid() {
        Grid::None => vec![GridCell::NONE],
        Grid::Dist => sorted
            .iter()
            .map(|&l| GridCell {
                lambda_dist: l,
                lambda_cosine: 0.0,
            })
            .collect(),
        Grid::Cosine => sorted
            .iter()
            .map(|&l| GridCell {
                lambda_dist: 0.0,
                lambda_cosine: l,
            })
            .collect(),
        Grid::Both => match (joint, marginal) {
            (false, Some(c)) => vec![c],
            _ => {
                let mut cells: Vec<GridCell> = sorted
                    .iter()
                    .flat_map(|&d| {
                        sorted.iter().map(move |&c| GridCell {
                            lambda_dist: d,
                            lambda_cosine: c,
                        })
                    })
                    .collect();
                cells.sort_by(|a, b| {
                    (a.lambda_dist + a.lambda_cosine)
                        .total_cmp(&(b.lambda_dist + b.lambda_cosine))
                        .then(a.lambda_dist.total_cmp(&b.lambda_dist))
                });
                cells
            }
        },
    }
}

pub struct GridResult<T> {
    pub best: usize,
    pub cells: Vec<GridCell>,
    pub runs: Vec<T>,
}

/// Evaluate every cell and keep the lowest validation score. Cells are
/// visited in the given order and only a strictly better score replaces the
/// incumbent, so ties go to the earlier (smaller-λ) cell.
pub fn grid_search<T>(
    cells: &[GridCell],
    mut run: impl FnMut(GridCell) -> Result<T>,
    score: impl Fn(&T) -> f64,
) -> Result<GridResult<T>> {
    if cells.is_empty() {
        return Err(ExperimentError::Config("empty λ grid".into()));
    }
    let mut runs = Vec::with_capacity(cells.len());
    let mut best = 0;
    for (i, &c) in cells.iter().enumerate() {
        let r = run(c)?;
        if i > 0 && score(&r) < score(&runs[best]) {
            best = i;
        }
        runs.push(r);
    }
    Ok(GridResult {
        best,
        cells: cells.to_vec(),
        runs,
    })
}

fn result_row(seed: u64, r: &StudentRun) -> ResultRow {
    ResultRow {
        seed,
        method: r.method,
        fraction: r.fraction,
        lambda_dist: r.cell.lambda_dist,
        lambda_cosine: r.cell.lambda_cosine,
        mse: r.test.mse,
        mae: r.test.mae,
        acc: r.test.acc,
        ern: r.test.ern,
        best_step: r.outcome.best_step,
        val_score: r.val_mse,
        checkpoint: r.checkpoint.clone(),
    }
}

/// Per-seed driver that memoizes full-data runs and λ selections.
struct SeedRunner<'c, 'a> {
    ctx: &'c RunContext<'a>,
    seed: u64,
    teacher: &'c TeacherRun,
    selected: BTreeMap<Method, GridCell>,
    full: BTreeMap<Method, ResultRow>,
    report: ExperimentReport,
}

impl<'c, 'a> SeedRunner<'c, 'a> {
    fn new(ctx: &'c RunContext<'a>, seed: u64, teacher: &'c TeacherRun) -> Self {
        Self {
            ctx,
            seed,
            teacher,
            selected: BTreeMap::new(),
            full: BTreeMap::new(),
            report: ExperimentReport::default(),
        }
    }

    fn record_run(&mut self, r: &StudentRun) {
        for p in &r.outcome.trace {
            self.report.traces.push(TraceRow {
                seed: self.seed,
                method: r.method,
                fraction: r.fraction,
                lambda_dist: r.cell.lambda_dist,
                lambda_cosine: r.cell.lambda_cosine,
                step: p.step,
                train_loss: p.train_loss,
                val_score: p.val_score,
            });
        }
        self.report.timing.push(TimingRow {
            seed: self.seed,
            run: r.checkpoint.clone(),
            seconds: r.seconds,
        });
    }

    fn student(&mut self, method: Method, cell: GridCell, fraction: f64) -> Result<StudentRun> {
        let r = distill_student(
            self.ctx,
            Some(&self.teacher.train_predictions),
            method,
            cell,
            fraction,
            self.seed,
        )?;
        self.record_run(&r);
        Ok(r)
    }

    fn marginal(&mut self) -> Result<Option<GridCell>> {
        if self.ctx.cfg.experiment.joint_grid {
            return Ok(None);
        }
        let d = self.selected_cell(Method::DkdDist)?;
        let c = self.selected_cell(Method::DkdCosine)?;
        Ok(Some(GridCell {
            lambda_dist: d.lambda_dist,
            lambda_cosine: c.lambda_cosine,
        }))
    }

    /// The λ cell chosen for `method` on the full training split.
    fn selected_cell(&mut self, method: Method) -> Result<GridCell> {
        if method.grid() == Grid::None {
            return Ok(GridCell::NONE);
        }
        if !self.selected.contains_key(&method) {
            self.full_run(method)?;
        }
        Ok(self.selected[&method])
    }

    /// Full-data result for `method`, running its grid search if needed.
    fn full_run(&mut self, method: Method) -> Result<ResultRow> {
        if let Some(r) = self.full.get(&method) {
            return Ok(r.clone());
        }
        let row = match method {
            Method::Teacher => {
                let t = self.teacher;
                ResultRow {
                    seed: self.seed,
                    method,
                    fraction: 1.0,
                    lambda_dist: 0.0,
                    lambda_cosine: 0.0,
                    mse: t.test.mse,
                    mae: t.test.mae,
                    acc: t.test.acc,
                    ern: t.test.ern,
                    best_step: t.outcome.best_step,
                    val_score: t.outcome.best_score,
                    checkpoint: t.checkpoint.clone(),
                }
            }
            Method::Sma | Method::Ema => self.moving_average(method)?,
            _ => {
                let marginal = if method.grid() == Grid::Both { self.marginal()? } else { None };
                let cfg = &self.ctx.cfg.experiment;
                let cells = grid_cells(method, &cfg.lambda_grid, cfg.joint_grid, marginal);
                let result = grid_search(&cells, |c| self.student(method, c, 1.0), |r| r.val_mse)?;
                if method.grid() != Grid::None {
                    for (i, r) in result.runs.iter().enumerate() {
                        self.report.grid.push(GridRow {
                            seed: self.seed,
                            method,
                            lambda_dist: r.cell.lambda_dist,
                            lambda_cosine: r.cell.lambda_cosine,
                            val_mse: r.val_mse,
                            test_mse: r.test.mse,
                            selected: i == result.best,
                        });
                    }
                }
                self.selected.insert(method, result.cells[result.best]);
                result_row(self.seed, &result.runs[result.best])
            }
        };
        self.full.insert(method, row.clone());
        Ok(row)
    }

    fn moving_average(&self, method: Method) -> Result<ResultRow> {
        let predict = |set: &SampleSet| -> Result<Vec<f64>> {
            set.slot_history
                .iter()
                .map(|h| match method {
                    Method::Sma => sma_predict(h, SMA_PERIODS),
                    _ => {
                        if h.len() < SMA_PERIODS {
                            return Err(crate::data::DataError::InsufficientHistory {
                                needed: SMA_PERIODS,
                                have: h.len(),
                            });
                        }
                        ema_predict(h, EMA_RHO)
                    }
                })
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(ExperimentError::from)
        };
        let data = self.ctx.data;
        let test = predict(&data.test)?;
        let val = predict(&data.validation)?;
        let m = self.ctx.test_metrics(&test, self.seed)?;
        let val_mse = val.iter().zip(&data.validation.targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>()
            / val.len() as f64;
        Ok(ResultRow {
            seed: self.seed,
            method,
            fraction: 1.0,
            lambda_dist: 0.0,
            lambda_cosine: 0.0,
            mse: m.mse,
            mae: m.mae,
            acc: m.acc,
            ern: m.ern,
            best_step: 0,
            val_score: val_mse,
            checkpoint: String::new(),
        })
    }

    /// Result at a training fraction, reusing the λ selected at full data.
    fn at_fraction(&mut self, method: Method, fraction: f64) -> Result<ResultRow> {
        if fraction == 1.0 || !method.is_student() {
            let mut r = self.full_run(method)?;
            r.fraction = fraction;
            return Ok(r);
        }
        let cell = if method.grid() == Grid::Both {
            match self.marginal()? {
                Some(c) => c,
                None => self.selected_cell(method)?,
            }
        } else {
            self.selected_cell(method)?
        };
        let r = self.student(method, cell, fraction)?;
        Ok(result_row(self.seed, &r))
    }
}

fn ordered(methods: &[Method]) -> Vec<Method> {
    let mut m = methods.to_vec();
    m.sort();
    m.dedup();
    m
}

/// Table-style results for one seed: every configured method on the full
/// training split.
pub fn run_main(ctx: &RunContext, seed: u64, teacher: &TeacherRun) -> Result<ExperimentReport> {
    let mut runner = SeedRunner::new(ctx, seed, teacher);
    let mut rows = Vec::new();
    for m in ordered(&ctx.cfg.experiment.methods) {
        rows.push(runner.full_run(m)?);
    }
    runner.report.rows = rows;
    Ok(runner.report)
}

/// Each sweep method at each configured fraction for one seed.
pub fn low_resource_sweep(ctx: &RunContext, seed: u64, teacher: &TeacherRun) -> Result<ExperimentReport> {
    sweep_with(&mut SeedRunner::new(ctx, seed, teacher))
}

fn sweep_with(runner: &mut SeedRunner) -> Result<ExperimentReport> {
    let cfg = &runner.ctx.cfg.experiment;
    let (fractions, methods) = (cfg.fractions.clone(), ordered(&cfg.sweep_methods));
    let mut rows = Vec::new();
    for &f in &fractions {
        let n = prefix_len(runner.ctx.data.train.len(), f);
        if n < runner.ctx.cfg.train.batch_size {
            return Err(ExperimentError::Config(format!(
                "fraction {f} leaves {n} training samples, fewer than one batch"
            )));
        }
    }
    for &f in &fractions {
        for &m in &methods {
            let mut row = runner.at_fraction(m, f)?;
            row.fraction = f;
            rows.push(row);
        }
    }
    let mut report = std::mem::take(&mut runner.report);
    report.rows = rows;
    Ok(report)
}

/// The full protocol: per seed, a teacher (or the shared first-seed
/// teacher), the main table, and optionally the low-resource sweep.
/// Sweep rows at fraction 1.0 duplicate the matching main rows.
pub fn run_experiment(ctx: &RunContext, main: bool, sweep: bool) -> Result<ExperimentReport> {
    let cfg = &ctx.cfg.experiment;
    let mut report = ExperimentReport::default();
    let mut shared: Option<TeacherRun> = None;
    for &seed in &cfg.seeds {
        let own;
        let teacher = if cfg.teacher_per_seed {
            own = train_teacher(ctx, seed)?;
            report.timing.push(TimingRow {
                seed,
                run: own.checkpoint.clone(),
                seconds: own.seconds,
            });
            &own
        } else {
            if shared.is_none() {
                let t = train_teacher(ctx, cfg.seeds[0])?;
                report.timing.push(TimingRow {
                    seed,
                    run: t.checkpoint.clone(),
                    seconds: t.seconds,
                });
                shared = Some(t);
            }
            shared.as_ref().expect("set above")
        };
        for p in &teacher.outcome.trace {
            report.traces.push(TraceRow {
                seed,
                method: Method::Teacher,
                fraction: 1.0,
                lambda_dist: 0.0,
                lambda_cosine: 0.0,
                step: p.step,
                train_loss: p.train_loss,
                val_score: p.val_score,
            });
        }
        let mut runner = SeedRunner::new(ctx, seed, teacher);
        if main {
            let mut rows = Vec::new();
            for m in ordered(&ctx.cfg.experiment.methods) {
                rows.push(runner.full_run(m)?);
            }
            let mut part = std::mem::take(&mut runner.report);
            part.rows = rows;
            report.extend(part);
        }
        if sweep {
            let mut part = sweep_with(&mut runner)?;
            if main {
                part.rows.retain(|r| r.fraction != 1.0);
            }
            report.extend(part);
        }
    }
    Ok(report)
}
