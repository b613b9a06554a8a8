use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute rather than relative scale.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
        tol,
        passed: true,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}

/// Central differences `(f(x + eps·e_i) - f(x - eps·e_i)) / 2eps` for every entry.
pub fn central_difference<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe)?;
        probe[i] = x[i] - eps;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!("f is not finite near index {i}")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the tape gradient of the scalar `f(x)` against central differences.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_parts(x.shape().to_vec(), values.to_vec()));
        let y = f(&mut tape, xv)?;
        scalar_value(&tape, y)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    scalar_value(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = central_difference(eval, x.data(), eps)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

pub(crate) fn scalar_value(tape: &Tape, y: Var) -> Result<f64> {
    let value = tape.value(y);
    if value.len() != 1 {
        return Err(Error::shape("grad_check", value.shape(), &[1]));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {v}")));
    }
    Ok(v)
}
