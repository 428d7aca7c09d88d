//! Central finite-difference verification of tape gradients (float64 only).

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step shrink factors tried when a perturbation crosses a kink.
const SHRINK: [f64; 4] = [1.0, 1e-1, 1e-2, 1e-3];
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates that needed a reduced step to stay on one smooth piece.
    pub shrunk: usize,
    /// Sample attempts used (> 1 when a degenerate point was resampled).
    pub attempts: u32,
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    Ok((value.data()[0], tape.branch_signature()))
}

/// Compares analytic gradients of the scalar built by `build` with central
/// differences at `inputs`, returning a full report.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let signature = tape.branch_signature();
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::from_parts(t.shape().to_vec(), vec![0.0; t.numel()])))
        .collect();
    drop(tape);

    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, shrunk: 0, attempts: 1 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let original = work[i].data()[j];
            let mut numeric = None;
            for (attempt, factor) in SHRINK.iter().enumerate() {
                let h = step * factor;
                work[i].data_mut()[j] = original + h;
                let (plus, sig_plus) = evaluate(&build, &work)?;
                work[i].data_mut()[j] = original - h;
                let (minus, sig_minus) = evaluate(&build, &work)?;
                work[i].data_mut()[j] = original;
                if sig_plus == signature && sig_minus == signature {
                    if attempt > 0 {
                        report.shrunk += 1;
                    }
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            let numeric = numeric.ok_or_else(|| {
                Error::DegeneratePoint(format!("input {i} element {j} sits on a non-differentiable point"))
            })?;
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Max relative error `|analytic − central| / max(|analytic|, |central|, 1e-8)`
/// over every element of every input.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check(build, inputs, step)?.max_relative_error)
}

/// Like [`grad_check`], but draws inputs from `sample(attempt)` and redraws
/// when the point is degenerate, up to `max_attempts` times.
pub fn finite_diff_check_sampled<S, F>(
    mut sample: S,
    build: F,
    step: f64,
    max_attempts: u32,
) -> Result<GradCheckReport>
where
    S: FnMut(u32) -> Vec<Tensor<f64>>,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut last = None;
    for attempt in 0..max_attempts.max(1) {
        let inputs = sample(attempt);
        match grad_check(&build, &inputs, step) {
            Ok(mut report) => {
                report.attempts = attempt + 1;
                return Ok(report);
            }
            Err(e @ Error::DegeneratePoint(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::DegeneratePoint("no attempts made".into())))
}
