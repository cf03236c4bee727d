use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::var::{grad, Var};

/// Outcome of comparing analytic gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub passed: bool,
}

/// Relative error between an analytic and a numeric gradient.
///
/// Each entry is measured against `max(|a|, |n|, 1e-3 * scale)`, where `scale`
/// is the largest magnitude in either gradient; entries that are tiny
/// compared to the overall gradient are thus not held to a relative bound
/// that round-off alone would break.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> (f64, f64, usize) {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut worst = (0.0, 0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        if rel > worst.0 {
            worst.0 = rel;
            worst.2 = i;
        }
        worst.1 = f64::max(worst.1, abs);
    }
    worst
}

/// Checks the gradient of the scalar function `f` at `x` against central
/// finite differences with step `step`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Var) -> Result<Var>,
{
    let input = Var::parameter(x.clone());
    let out = f(&input)?;
    if out.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let analytic = grad(&out, &[input], false)?.remove(0).value().clone();

    let eval = |t: Tensor| -> Result<f64> { f(&Var::constant(t))?.item() };
    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }
    let numeric = Tensor::new(x.shape(), numeric)?;
    let (max_rel_error, max_abs_error, worst_index) = relative_errors(analytic.data(), numeric.data());
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        worst_index,
        passed: max_rel_error < tol,
        analytic,
        numeric,
    })
}
