use serde::Serialize;

use super::params::{Bound, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &ParameterSet) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    Ok(tape.value(loss).item())
}

/// Compares reverse-mode gradients of `f` with central differences for every
/// entry of every trainable parameter.
pub fn grad_check<F>(f: F, params: &ParameterSet, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = params.gradients(&bound, &grads)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let mut probe = params.clone();
    for (name, grad) in &analytic {
        for idx in 0..grad.numel() {
            let original = params.get(name)?.data()[idx];
            probe.get_mut(name)?.data_mut()[idx] = original + step;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(name)?.data_mut()[idx] = original - step;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(name)?.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[idx];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
