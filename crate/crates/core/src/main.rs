use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use volkd::data;
use volkd::experiment::config::DataSource;
use volkd::experiment::dataset::prepare;
use volkd::experiment::report::{emit_report, read_results, ExperimentReport};
use volkd::experiment::train::predict_set;
use volkd::experiment::{
    distill_student, run_experiment, train_teacher, ExperimentConfig, ExperimentError, GridCell, Method, RunContext,
};
use volkd::forecaster::ForecasterModel;

#[derive(Parser)]
#[command(name = "volkd", version, about = "Probabilistic volume forecasting with distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as OHLCV CSV.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher for one seed and save its checkpoint.
    TrainTeacher {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one student against a saved teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda_dist: f64,
        #[arg(long, default_value_t = 0.0)]
        lambda_cosine: f64,
    },
    /// Full-data table over all seeds, with the λ grid search per seed.
    Grid,
    /// Training-fraction sweep over all seeds.
    Sweep {
        /// Also run the full-data table in the same pass.
        #[arg(long)]
        with_main: bool,
    },
    /// Rebuild summary, gains and plots from an existing results.csv.
    Report {
        /// Defaults to `<output.dir>/results.csv`.
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.join("checkpoints")
}

fn write_config(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let dir = &cfg.output.dir;
    let io = |source| ExperimentError::Io {
        path: dir.clone(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()).map_err(io)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::GenData { out } => {
            if cfg.data.source != DataSource::Synthetic {
                return Err(ExperimentError::Config("gen-data needs data.source = \"synthetic\"".into()));
            }
            let records = volkd::experiment::dataset::load_records(&cfg)?;
            data::write_csv(&out, &records)?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::TrainTeacher { seed } => {
            let data = prepare(&cfg)?;
            let ctx = RunContext {
                cfg: &cfg,
                data: &data,
                checkpoint_dir: Some(checkpoint_dir(&cfg)),
            };
            let t = train_teacher(&ctx, seed)?;
            println!(
                "teacher seed {seed}: {} params, best step {}, validation NLL {:.5}, test MSE {:.5}, checkpoint {}",
                t.model.parameter_count(),
                t.outcome.best_step,
                t.outcome.best_score,
                t.test.mse,
                checkpoint_dir(&cfg).join(&t.checkpoint).display()
            );
        }
        Command::Distill {
            teacher,
            method,
            seed,
            fraction,
            lambda_dist,
            lambda_cosine,
        } => {
            let data = prepare(&cfg)?;
            let model = ForecasterModel::load_with_config(&teacher, cfg.teacher_config())?;
            let preds = predict_set(&model, &data.train, cfg.train.eval_batch)?;
            let ctx = RunContext {
                cfg: &cfg,
                data: &data,
                checkpoint_dir: Some(checkpoint_dir(&cfg)),
            };
            let cell = GridCell {
                lambda_dist,
                lambda_cosine,
            };
            let r = distill_student(&ctx, Some(&preds), method, cell, fraction, seed)?;
            println!(
                "{method} seed {seed} fraction {fraction}: best step {}, validation MSE {:.5}, test MSE {:.5} MAE {:.5} ACC {:.4} ERN {}",
                r.outcome.best_step, r.val_mse, r.test.mse, r.test.mae, r.test.acc, r.test.ern
            );
        }
        Command::Grid => experiment(&cfg, true, false)?,
        Command::Sweep { with_main } => experiment(&cfg, with_main, true)?,
        Command::Report { results } => {
            let path = results.unwrap_or_else(|| cfg.output.dir.join("results.csv"));
            let report = ExperimentReport {
                rows: read_results(&path)?,
                ..Default::default()
            };
            let dir = path.parent().unwrap_or(Path::new("."));
            volkd::experiment::report::emit_derived(&report, dir)?;
            println!("rebuilt summary from {} rows in {}", report.rows.len(), dir.display());
        }
    }
    Ok(())
}

fn experiment(cfg: &ExperimentConfig, main: bool, sweep: bool) -> Result<(), ExperimentError> {
    let data = prepare(cfg)?;
    let ctx = RunContext {
        cfg,
        data: &data,
        checkpoint_dir: Some(checkpoint_dir(cfg)),
    };
    let report = run_experiment(&ctx, main, sweep)?;
    write_config(cfg)?;
    emit_report(&report, &cfg.output.dir)?;
    for s in report.summary() {
        println!(
            "{:<16} fraction {:<4} MSE {:.5} ± {:.5}  MAE {:.5}  ACC {:.4}  ERN {:.0}",
            s.method.label(),
            s.fraction,
            s.mse_mean,
            s.mse_std,
            s.mae_mean,
            s.acc_mean,
            s.ern_mean
        );
    }
    println!("report written to {}", cfg.output.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
