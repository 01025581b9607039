//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on fresh tapes with
//! constant leaves, so it shares no code path with the reverse sweep it
//! checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradients_signed(inputs, &vec![1.0; inputs.len()], eps, f)
}

/// Like [`check_gradients`], but expects the analytic gradient of input `i`
/// to equal `signs[i]` times the numeric one. A sign of `-1` marks inputs
/// that sit behind a gradient reversal (ascent players in a min-max game).
pub fn check_gradients_signed<F>(inputs: &[Tensor], signs: &[f64], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if signs.len() != inputs.len() {
        return Err(Error::shape("gradcheck", "one sign per input"));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;

            let numeric = signs[i] * (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
