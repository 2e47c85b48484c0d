//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! every backward rule on the tape.

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Perturbation applied on each side of the point.
    pub step: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// on both sides compare as equal.
    pub floor: f64,
    /// Check at most this many entries per tensor (evenly strided).
    pub max_entries_per_tensor: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_tensor: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.item(loss)
}

/// Analytic gradients of the scalar built by `f` versus central differences,
/// over every differentiable tensor in `params`.
pub fn check_gradients<F>(params: &[Tensor], cfg: GradCheck, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport::default();
    for ti in 0..work.len() {
        if !work[ti].requires_grad() {
            continue;
        }
        let n = work[ti].numel();
        let stride = n.div_ceil(cfg.max_entries_per_tensor.max(1)).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + cfg.step;
            let plus = evaluate(&work, &f)?;
            work[ti].data_mut()[idx] = orig - cfg.step;
            let minus = evaluate(&work, &f)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti][idx];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Mismatch {
                    tensor: ti,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient() {
        let x = Tensor::parameter(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
        let r = check_gradients(&[x], GradCheck::default(), |t, v| {
            let e = t.exp(v[0])?;
            let s = t.square(e)?;
            t.sum(s)
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_inputs_are_skipped() {
        let x = Tensor::parameter(vec![2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let r = check_gradients(&[x, c], GradCheck::default(), |t, v| {
            let p = t.mul(v[0], v[1])?;
            t.sum(p)
        })
        .unwrap();
        assert_eq!(r.checked, 2);
    }
}
