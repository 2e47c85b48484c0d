//! One PASS/FAIL line per acceptance criterion. The directional experiments
//! (criteria 7 and 8) run the desk-scale protocol in `configs/desk.toml`.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volkd::data::{load_csv, DataError, CSV_HEADER};
use volkd::distill::{
    ail_loss, ckd_loss, dkd_loss, nll_loss, vanilla_kd_loss, BatchOutputs, LossError,
};
use volkd::experiment::dataset::prepare;
use volkd::experiment::report::{emit_report, ExperimentReport};
use volkd::experiment::{run_experiment, ExperimentConfig, Method, RunContext};
use volkd::forecaster::{parameter_count, ForecasterConfig, ForecasterError, ForecasterModel};
use volkd::gaussian::quadrature::integrate_over_support;
use volkd::gaussian::tape::GaussianVars;
use volkd::gaussian::{
    cosine_correlation, dist_correlation_paper, inner_product, jeffreys_exact, kl_divergence, CorrelationMetric,
    GaussianParams,
};
use volkd::metrics::{directional_accuracy, error_ranking_number, EvalBatch};
use volkd::tensor::gradcheck::{check_gradients, GradCheck};
use volkd::tensor::{Tape, TensorError, Var};

const DESK: &str = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml"));

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_pair(rng: &mut ChaCha8Rng) -> (GaussianParams, GaussianParams) {
    let mut g = || GaussianParams::new(rng.random_range(-3.0..3.0), rng.random_range(0.1..3.0)).unwrap();
    (g(), g())
}

/// Closed forms against adaptive quadrature over 200 random pairs.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 3];
    for _ in 0..200 {
        let (p, q) = random_pair(&mut rng);
        let kl = integrate_over_support(|t| p.density(t) * (p.log_density(t) - q.log_density(t)), &[p, q]).unwrap();
        let ip = integrate_over_support(|t| p.density(t) * q.density(t), &[p, q]).unwrap();
        let pp = integrate_over_support(|t| p.density(t) * p.density(t), &[p]).unwrap();
        let qq = integrate_over_support(|t| q.density(t) * q.density(t), &[q]).unwrap();
        let cos = ip / (pp * qq).sqrt();
        for (w, err) in worst.iter_mut().zip([
            (kl_divergence(&p, &q) - kl).abs(),
            (inner_product(&p, &q) - ip).abs(),
            (cosine_correlation(&p, &q) - cos).abs(),
        ]) {
            *w = w.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|&e| e < 1e-7) && secs < 10.0;
    outcome(
        pass,
        format!(
            "max |err| kl {:.1e}, inner {:.1e}, cosine {:.1e} (tol 1e-7); {secs:.2}s (limit 10s)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for s in [0.5, 1.0, 2.0] {
        let p = GaussianParams::new(0.7, s).unwrap();
        let expected = 1.0 / (4.0 * std::f64::consts::PI * s * s).sqrt();
        worst = worst.max((inner_product(&p, &p) - expected).abs());
        worst = worst.max((cosine_correlation(&p, &p) - 1.0).abs());
    }
    outcome(worst < 1e-12, format!("max |err| {worst:.1e} (tol 1e-12)"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = true;
    let mut worst_independent = 0.0f64;
    for _ in 0..1000 {
        let (p, q) = random_pair(&mut rng);
        let j = jeffreys_exact(&p, &q);
        exact &= j == 0.5 * (kl_divergence(&p, &q) + kl_divergence(&q, &p));
        let (a, b, d) = (p.sigma() * p.sigma(), q.sigma() * q.sigma(), p.mu() - q.mu());
        let independent = 0.5 * ((a + d * d) / (2.0 * b) + (b + d * d) / (2.0 * a) - 1.0);
        worst_independent = worst_independent.max((j - independent).abs() / independent.max(1.0));
    }
    let (p, q) = (GaussianParams::new(0.0, 1.0).unwrap(), GaussianParams::new(1.0, 1.0).unwrap());
    let (paper, jeff) = (dist_correlation_paper(&p, &q), jeffreys_exact(&p, &q));
    let pass = exact && worst_independent < 1e-12 && paper == 1.0 && jeff == 0.5;
    outcome(
        pass,
        format!(
            "½(KL+KL) exact on 1000 pairs: {exact}; vs expanded form {worst_independent:.1e}; printed form {paper}, exact {jeff}"
        ),
    )
}

fn tensor_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

type LossFn = fn(&mut Tape, &BatchOutputs) -> Result<Var, LossError>;

/// Finite-difference checks of each loss term through a dim-8 one-layer model.
fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = ForecasterConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        window_len: 4,
        ..ForecasterConfig::student()
    };
    let model = ForecasterModel::new(cfg.clone(), 21).unwrap();
    let b = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let window: Vec<f64> = (0..b * cfg.window_len * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..b).map(|_| rng.random_range(-1.5..1.5)).collect();
    let tm: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ts: Vec<f64> = (0..b).map(|_| rng.random_range(0.3..1.5)).collect();
    let terms: [(&str, LossFn); 7] = [
        ("nll", nll_loss),
        ("dkd", dkd_loss),
        ("dist-ckd (printed)", |t, o| ckd_loss(t, o, CorrelationMetric::DistPaper)),
        ("dist-ckd (jeffreys)", |t, o| ckd_loss(t, o, CorrelationMetric::JeffreysExact)),
        ("cosine-ckd", |t, o| ckd_loss(t, o, CorrelationMetric::Cosine)),
        ("vanilla kd", |t, o| vanilla_kd_loss(t, o, 0.5)),
        ("ail", |t, o| ail_loss(t, o, 0.5)),
    ];
    let mut worst = (0.0f64, "");
    for (name, f) in terms {
        let r = check_gradients(model.params(), GradCheck::default(), |t, p| {
            let win = t.constant(vec![b, cfg.window_len, 5], window.clone())?;
            let out = model.forward(t, p, win).map_err(|e| match e {
                ForecasterError::Tensor(te) => te,
                other => TensorError::Contract(other.to_string()),
            })?;
            let batch = BatchOutputs {
                student: out.into(),
                teacher: Some(GaussianVars::constant(t, &tm, &ts)?),
                targets: t.constant(vec![b], y.clone())?,
            };
            f(t, &batch).map_err(tensor_err)
        })
        .unwrap();
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-3 && secs < 60.0,
        format!("worst relative error {:.1e} ({}) (tol 1e-3); {secs:.2}s (limit 60s)", worst.0, worst.1),
    )
}

fn criterion_5() -> Outcome {
    let mut t = Tape::new();
    let mu = [0.3, -1.2, 0.8, 2.0, -0.1];
    let sigma = [0.5, 1.1, 0.9, 2.5, 0.2];
    let g = GaussianVars::constant(&mut t, &mu, &sigma).unwrap();
    let out = BatchOutputs {
        student: g,
        teacher: Some(GaussianVars::constant(&mut t, &mu, &sigma).unwrap()),
        targets: t.constant(vec![5], vec![0.0; 5]).unwrap(),
    };
    let mut values = Vec::new();
    let d = dkd_loss(&mut t, &out).unwrap();
    values.push(("dkd", t.item(d).unwrap()));
    for (name, m) in [
        ("dist-ckd", CorrelationMetric::DistPaper),
        ("dist-ckd (jeffreys)", CorrelationMetric::JeffreysExact),
        ("cosine-ckd", CorrelationMetric::Cosine),
    ] {
        let c = ckd_loss(&mut t, &out, m).unwrap();
        values.push((name, t.item(c).unwrap()));
    }
    let pass = values.iter().all(|(_, v)| *v == 0.0);
    let detail: Vec<String> = values.iter().map(|(n, v)| format!("{n} = {v}")).collect();
    outcome(pass, detail.join(", "))
}

fn criterion_6() -> Outcome {
    let reversed = error_ranking_number(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0], 3, 0).unwrap();
    let n = 9usize;
    let targets: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
    let constant = error_ranking_number(&vec![1.0; n], &targets, n, 0).unwrap();
    let tie = EvalBatch::new(&[1.0, 2.0], &[1.5, 3.0], &[1.0, 1.0]).unwrap();
    let acc = directional_accuracy(&tie);
    let pass = reversed == 6 && constant == (n * (n - 1)) as u64 && acc == 0.5;
    outcome(
        pass,
        format!("reversed ERN {reversed} (want 6); constant ERN {constant} (want {}); tie ACC {acc} (want 0.5)", n * (n - 1)),
    )
}

/// Mean test MSE of `method` minus that of its counterpart, per fraction.
fn reduction(report: &ExperimentReport, method: Method, fraction: f64) -> Option<f64> {
    let base = method.counterpart()?;
    Some(report.mean_mse(base, fraction)? - report.mean_mse(method, fraction)?)
}

const DISTILLED: [Method; 6] = [
    Method::VanillaKd,
    Method::Ail,
    Method::Dkd,
    Method::DkdDist,
    Method::DkdCosine,
    Method::DkdBoth,
];

fn criterion_7(report: &ExperimentReport, secs: f64, symbols: usize, slots: usize, seeds: usize) -> Outcome {
    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for m in DISTILLED {
        let base = m.counterpart().unwrap();
        match (report.mean_mse(m, 1.0), report.mean_mse(base, 1.0)) {
            (Some(a), Some(b)) => {
                parts.push(format!("{m} {a:.5} vs {base} {b:.5}"));
                if a > b {
                    failures.push(format!("{m} > {base}"));
                }
            }
            _ => failures.push(format!("{m} missing")),
        }
    }
    match (report.mean_mse(Method::DkdCosine, 1.0), report.mean_mse(Method::Dkd, 1.0)) {
        (Some(c), Some(d)) if c <= d => parts.push(format!("Cosine-CKD {c:.5} <= DKD {d:.5}")),
        (Some(c), Some(d)) => failures.push(format!("Cosine-CKD {c:.5} > DKD {d:.5}")),
        _ => failures.push("DKD rows missing".into()),
    }
    let scale = symbols >= 50 && slots >= 2000 && seeds == 7;
    if !scale {
        failures.push(format!("{symbols} symbols x {slots} slots x {seeds} seeds below required scale"));
    }
    if secs >= 1800.0 {
        failures.push(format!("runtime {secs:.0}s >= 1800s"));
    }
    let detail = format!(
        "{}; {symbols}x{slots}, {seeds} seeds, {secs:.0}s (limit 1800s){}",
        parts.join("; "),
        if failures.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failures.join(", "))
        }
    );
    outcome(failures.is_empty(), detail)
}

fn criterion_8(report: &ExperimentReport) -> Outcome {
    let low = reduction(report, Method::DkdCosine, 0.1);
    let full = reduction(report, Method::DkdCosine, 1.0);
    match (low, full) {
        (Some(l), Some(f)) => outcome(
            l > f,
            format!("DKD+Cosine-CKD MSE reduction over DeepAR: {l:.5} at 10% vs {f:.5} at 100%"),
        ),
        _ => outcome(false, "sweep rows missing"),
    }
}

const TINY: &str = r#"
[data]
window_len = 8
[data.synthetic]
num_symbols = 4
num_slots = 300
seed = 5
[model]
model_dim = 16
num_heads = 2
ffn_dim = 32
teacher_layers = 2
[train]
eval_interval = 100
max_steps = 200
[experiment]
seeds = [0, 1]
fractions = [0.5, 1.0]
methods = ["teacher", "sma", "ema", "min_mse", "deep_ar", "vanilla_kd", "ail", "dkd", "dkd_cosine"]
sweep_methods = ["deep_ar", "dkd_cosine"]
ern_sample = 300
"#;

fn emit_tiny(dir: &Path) -> Vec<u8> {
    let cfg = ExperimentConfig::from_toml_str(TINY, &[]).unwrap();
    let data = prepare(&cfg).unwrap();
    let ctx = RunContext {
        cfg: &cfg,
        data: &data,
        checkpoint_dir: None,
    };
    let report = run_experiment(&ctx, true, true).unwrap();
    emit_report(&report, dir).unwrap();
    std::fs::read(dir.join("results.csv")).unwrap()
}

fn csv_fixtures() -> Vec<(&'static str, String, fn(&DataError) -> bool)> {
    let header = CSV_HEADER.join(",");
    let row = |body: &str| format!("{header}\nAAA,2020-01-02T09:00:00,10,11,9,10.5,1000\n{body}\n");
    vec![
        ("high below low", row("AAA,2020-01-02T10:00:00,10,9,11,10,500"), |e| matches!(e, DataError::Invalid { .. })),
        ("negative volume", row("AAA,2020-01-02T10:00:00,10,11,9,10,-5"), |e| matches!(e, DataError::Invalid { .. })),
        ("zero price", row("AAA,2020-01-02T10:00:00,0,11,9,10,5"), |e| matches!(e, DataError::Invalid { .. })),
        ("close above high", row("AAA,2020-01-02T10:00:00,10,11,9,12,5"), |e| matches!(e, DataError::Invalid { .. })),
        ("non-finite volume", row("AAA,2020-01-02T10:00:00,10,11,9,10,NaN"), |e| matches!(e, DataError::Invalid { .. })),
        ("duplicate timestamp", row("AAA,2020-01-02T09:00:00,10,11,9,10,5"), |e| matches!(e, DataError::Invalid { .. })),
        ("bad timestamp", row("AAA,yesterday,10,11,9,10,5"), |e| matches!(e, DataError::Parse { .. })),
        ("non-numeric price", row("AAA,2020-01-02T10:00:00,ten,11,9,10,5"), |e| matches!(e, DataError::Parse { .. })),
        ("wrong header", "sym,time,o,h,l,c,v\nAAA,2020-01-02T09:00:00,10,11,9,10.5,1000\n".to_string(), |e| {
            matches!(e, DataError::Parse { line: 1, .. })
        }),
    ]
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let a = emit_tiny(&dir.path().join("a"));
    let b = emit_tiny(&dir.path().join("b"));
    let identical = a == b && !a.is_empty();

    let cfg = ForecasterConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 4,
        ffn_dim: 24,
        window_len: 6,
        ..ForecasterConfig::student()
    };
    let model = ForecasterModel::new(cfg, 31).unwrap();
    let ckpt = dir.path().join("ckpt");
    model.save(&ckpt).unwrap();
    let back = ForecasterModel::load(&ckpt).unwrap();
    let round_trip = model.params().iter().zip(back.params()).all(|(x, y)| {
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(u, v)| u.to_bits() == v.to_bits())
    }) && model.names() == back.names();

    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for (name, text, expected) in csv_fixtures() {
        let p = dir.path().join(format!("{}.csv", name.replace(' ', "_")));
        std::fs::write(&p, text).unwrap();
        match load_csv(&p) {
            Err(e) if expected(&e) => rejected.push(name),
            _ => accepted.push(name),
        }
    }
    let pass = identical && round_trip && accepted.is_empty();
    outcome(
        pass,
        format!(
            "results.csv identical across runs: {identical}; checkpoint bit-exact: {round_trip}; CSV fixtures rejected {}/{}{}",
            rejected.len(),
            rejected.len() + accepted.len(),
            if accepted.is_empty() {
                String::new()
            } else {
                format!(" (not rejected as documented: {})", accepted.join(", "))
            }
        ),
    )
}

fn criterion_10() -> Outcome {
    let s = parameter_count(&ForecasterConfig::student());
    let t = parameter_count(&ForecasterConfig::teacher());
    let within = |n: usize, target: f64| (n as f64 - target).abs() <= 0.2 * target;
    outcome(
        within(s, 0.3e6) && within(t, 1.5e6),
        format!("student {s} (0.3M ±20%), teacher {t} (1.5M ±20%)"),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
    ];

    let cfg = ExperimentConfig::from_toml_str(DESK, &[]).unwrap();
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let data = prepare(&cfg).unwrap();
    let ctx = RunContext {
        cfg: &cfg,
        data: &data,
        checkpoint_dir: None,
    };
    let report = run_experiment(&ctx, true, true).unwrap();
    let secs = start.elapsed().as_secs_f64();
    emit_report(&report, out.path()).unwrap();
    if let Ok(dir) = std::env::var("VOLKD_ACCEPTANCE_OUT") {
        emit_report(&report, Path::new(&dir)).unwrap();
    }
    let s = &cfg.data.synthetic;
    results.push((7, criterion_7(&report, secs, s.num_symbols, s.num_slots, cfg.experiment.seeds.len())));
    results.push((8, criterion_8(&report)));
    results.push((9, criterion_9()));
    results.push((10, criterion_10()));

    for (n, o) in &results {
        println!("criterion {n:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
