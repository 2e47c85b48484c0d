use std::process::Command;
use std::sync::OnceLock;

use volkd::distill::{BaselineMode, LossConfig};
use volkd::experiment::dataset::{prepare, PreparedData};
use volkd::experiment::report::{emit_report, read_results};
use volkd::experiment::train::{predict_set, train, Predictions, Selection, TrainSettings};
use volkd::experiment::{
    distill_student, low_resource_sweep, run_experiment, run_main, train_teacher, ExperimentConfig, ExperimentError,
    GridCell, Method, RunContext,
};
use volkd::forecaster::{ForecasterConfig, ForecasterModel};

const TINY: &str = r#"
[data]
window_len = 8
[data.synthetic]
num_symbols = 4
num_slots = 300
seed = 11
[model]
model_dim = 16
num_heads = 2
ffn_dim = 32
teacher_layers = 2
[train]
eval_interval = 100
max_steps = 200
eval_batch = 256
[experiment]
seeds = [0]
fractions = [0.5, 1.0]
ern_sample = 400
"#;

fn tiny(overrides: &[&str]) -> ExperimentConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(TINY, &o).unwrap()
}

fn data() -> &'static PreparedData {
    static DATA: OnceLock<PreparedData> = OnceLock::new();
    DATA.get_or_init(|| prepare(&tiny(&[])).unwrap())
}

fn ctx(cfg: &ExperimentConfig) -> RunContext<'_> {
    RunContext {
        cfg,
        data: data(),
        checkpoint_dir: None,
    }
}

/// Mean NLL of the fixed Gaussian `N(m, s)` over `y`.
fn constant_nll(y: &[f64], m: f64, s: f64) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI * s * s).ln();
    y.iter().map(|v| c + (v - m) * (v - m) / (2.0 * s * s)).sum::<f64>() / y.len() as f64
}

fn mean_std(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    (m, (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
}

#[test]
fn teacher_beats_constant_gaussian_on_validation() {
    let cfg = tiny(&["train.teacher_max_steps=500"]);
    let t = train_teacher(&ctx(&cfg), 0).unwrap();
    let (m, s) = mean_std(&data().train.targets);
    let baseline = constant_nll(&data().validation.targets, m, s);
    assert!(t.outcome.best_score < baseline, "{} vs {baseline}", t.outcome.best_score);
}

#[test]
fn teacher_runs_are_deterministic() {
    let cfg = tiny(&[]);
    let a = train_teacher(&ctx(&cfg), 3).unwrap();
    let b = train_teacher(&ctx(&cfg), 3).unwrap();
    assert_eq!(a.outcome, b.outcome);
    assert_eq!(a.model.snapshot(), b.model.snapshot());
    assert_eq!(a.train_predictions, b.train_predictions);
}

#[test]
fn one_layer_model_overfits_small_set() {
    let set = data().train.prefix(64);
    let cfg = ForecasterConfig {
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        window_len: 8,
        ..ForecasterConfig::student()
    };
    let mut model = ForecasterModel::new(cfg, 5).unwrap();
    let loss = LossConfig {
        baseline_mode: BaselineMode::Deepar,
        ..LossConfig::default()
    };
    let settings = TrainSettings::from_config(&tiny(&[]).train, 2000);
    train(&mut model, &set, &set, &loss, None, &settings, Selection::Nll, 1).unwrap();
    let p = predict_set(&model, &set, 64).unwrap();
    let (m, s) = mean_std(&set.targets);
    assert!(p.mean_nll(&set.targets) < constant_nll(&set.targets, m, s));
}

#[test]
fn min_mse_ignores_the_teacher() {
    let cfg = tiny(&[]);
    let c = ctx(&cfg);
    let n = data().train.len();
    let fake = Predictions {
        mu: vec![3.0; n],
        sigma: vec![0.5; n],
    };
    let with = distill_student(&c, Some(&fake), Method::MinMse, GridCell::NONE, 1.0, 2).unwrap();
    let without = distill_student(&c, None, Method::MinMse, GridCell::NONE, 1.0, 2).unwrap();
    assert_eq!(with.test, without.test);
    assert_eq!(with.outcome, without.outcome);
}

#[test]
fn distilling_leaves_teacher_untouched() {
    let cfg = tiny(&[]);
    let c = ctx(&cfg);
    let t = train_teacher(&c, 0).unwrap();
    let before = t.model.snapshot();
    let preds_before = predict_set(&t.model, &data().train, 256).unwrap();
    let cell = GridCell {
        lambda_dist: 2.0,
        lambda_cosine: 5.0,
    };
    distill_student(&c, Some(&t.train_predictions), Method::DkdBoth, cell, 1.0, 0).unwrap();
    assert_eq!(t.model.snapshot(), before);
    assert_eq!(predict_set(&t.model, &data().train, 256).unwrap(), preds_before);
}

#[test]
fn identical_student_has_zero_dkd_from_the_first_step() {
    let cfg = ForecasterConfig {
        num_layers: 1,
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        window_len: 8,
        ..ForecasterConfig::student()
    };
    let set = data().train.prefix(256);
    let teacher = ForecasterModel::new(cfg.clone(), 9).unwrap();
    let preds = predict_set(&teacher, &set, 256).unwrap();
    let mut student = ForecasterModel::new(cfg, 9).unwrap();
    let loss = LossConfig {
        lambda_nll: 0.0,
        lambda_dkd: 1e4,
        ..LossConfig::default()
    };
    let mut settings = TrainSettings::from_config(&tiny(&[]).train, 1);
    settings.eval_interval = 1;
    let out = train(&mut student, &set, &set, &loss, Some(&preds), &settings, Selection::Mse, 0).unwrap();
    assert!(out.trace[0].train_loss.abs() < 1e-9, "{}", out.trace[0].train_loss);
}

#[test]
fn full_fraction_reproduces_the_standard_run() {
    let cfg = tiny(&["experiment.methods=[\"deep_ar\", \"dkd_cosine\"]", "experiment.sweep_methods=[\"deep_ar\", \"dkd_cosine\"]"]);
    let c = ctx(&cfg);
    let t = train_teacher(&c, 0).unwrap();
    let main = run_main(&c, 0, &t).unwrap();
    let sweep = low_resource_sweep(&c, 0, &t).unwrap();
    for m in [Method::DeepAr, Method::DkdCosine] {
        assert_eq!(main.row(0, m, 1.0), sweep.row(0, m, 1.0), "{m}");
    }
    let direct = distill_student(&c, Some(&t.train_predictions), Method::DeepAr, GridCell::NONE, 1.0, 0).unwrap();
    assert_eq!(main.row(0, Method::DeepAr, 1.0).unwrap().mse, direct.test.mse);
    let half = sweep.row(0, Method::DkdCosine, 0.5).unwrap();
    let selected = main.row(0, Method::DkdCosine, 1.0).unwrap();
    assert_eq!(half.lambda_cosine, selected.lambda_cosine);
}

#[test]
fn sub_batch_fraction_is_a_config_error() {
    let cfg = tiny(&["experiment.fractions=[0.001]", "experiment.sweep_methods=[\"deep_ar\"]"]);
    let c = ctx(&cfg);
    let t = train_teacher(&c, 0).unwrap();
    let err = low_resource_sweep(&c, 0, &t).err().unwrap();
    assert!(matches!(err, ExperimentError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn grid_records_every_cell() {
    let cfg = tiny(&[
        "experiment.methods=[\"dkd_dist\", \"dkd_cosine\", \"dkd_both\"]",
        "experiment.joint_grid=true",
        "train.max_steps=100",
    ]);
    let r = run_experiment(&ctx(&cfg), true, false).unwrap();
    let count = |m: Method| r.grid.iter().filter(|g| g.method == m).count();
    assert_eq!(count(Method::DkdDist), 4);
    assert_eq!(count(Method::DkdCosine), 4);
    assert_eq!(count(Method::DkdBoth), 16);
    for m in [Method::DkdDist, Method::DkdCosine, Method::DkdBoth] {
        let chosen: Vec<_> = r.grid.iter().filter(|g| g.method == m && g.selected).collect();
        assert_eq!(chosen.len(), 1);
        let best = r
            .grid
            .iter()
            .filter(|g| g.method == m)
            .map(|g| g.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(chosen[0].val_mse, best);
        let row = r.row(0, m, 1.0).unwrap();
        assert_eq!((row.lambda_dist, row.lambda_cosine), (chosen[0].lambda_dist, chosen[0].lambda_cosine));
    }
}

#[test]
fn emitted_results_read_back() {
    let cfg = tiny(&["experiment.methods=[\"sma\", \"ema\", \"min_mse\"]"]);
    let r = run_experiment(&ctx(&cfg), true, false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&r, dir.path()).unwrap();
    assert_eq!(read_results(&dir.path().join("results.csv")).unwrap(), r.rows);
}

fn cli(args: &[&str], out: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_volkd"))
        .args(args)
        .env("VOLKD_OUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_reports_categorized_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let bad = cli(&["grid", "--config", c, "--set", "train.lr=-1"], &out);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("config"));

    let missing = cli(
        &["grid", "--config", c, "--set", "data.source=\"csv\"", "--set", "data.csv_path=\"/nonexistent/x.csv\""],
        &out,
    );
    assert_eq!(missing.status.code(), Some(5));

    let unknown = cli(&["grid", "--config", c, "--set", "train.no_such_key=1"], &out);
    assert_eq!(unknown.status.code(), Some(2));

    let no_results = cli(&["report", "--results", "/nonexistent/results.csv"], &out);
    assert_eq!(no_results.status.code(), Some(5));
}

#[test]
fn cli_generates_data_and_runs_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let csv = dir.path().join("data.csv");
    let out = dir.path().join("out");

    let g = cli(&["gen-data", "--config", c, "--out", csv.to_str().unwrap()], &out);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));

    let csv_set = format!("data.csv_path={:?}", csv.to_str().unwrap());
    let run = cli(
        &[
            "grid",
            "--config",
            c,
            "--set",
            "data.source=\"csv\"",
            "--set",
            &csv_set,
            "--set",
            "experiment.methods=[\"sma\", \"deep_ar\"]",
        ],
        &out,
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["results.csv", "summary.csv", "grid.csv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    std::fs::remove_file(out.join("summary.csv")).unwrap();
    let rep = cli(&["report", "--config", c], &out);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    assert!(out.join("summary.csv").exists());

    let teacher = cli(&["train-teacher", "--config", c, "--seed", "1"], &out);
    assert!(teacher.status.success(), "{}", String::from_utf8_lossy(&teacher.stderr));
    let ckpt = out.join("checkpoints").join("teacher_s1");
    let d = cli(
        &["distill", "--config", c, "--teacher", ckpt.to_str().unwrap(), "--method", "DKD+Cosine-CKD", "--lambda-cosine", "2"],
        &out,
    );
    assert!(d.status.success(), "{}", String::from_utf8_lossy(&d.stderr));
    assert!(String::from_utf8_lossy(&d.stdout).contains("DKD+Cosine-CKD"));
}
