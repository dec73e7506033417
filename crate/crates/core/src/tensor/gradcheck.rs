//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the gradient returned by `f` at `point` with central differences.
///
/// `f` maps a parameter vector to `(value, analytic gradient)`. Only the value
/// is used at the perturbed probes.
pub fn grad_check<F>(mut f: F, point: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(eps > 0.0) {
        return Err(Error::domain("grad_check", format!("eps must be positive, got {eps}")));
    }
    let (f0, analytic) = f(point)?;
    if !f0.is_finite() {
        return Err(Error::Numeric("objective is non-finite at the base point".into()));
    }
    if analytic.len() != point.len() {
        return Err(Error::dim(
            "grad_check",
            format!("gradient of length {} for {} parameters", analytic.len(), point.len()),
        ));
    }
    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let (plus, _) = f(&probe)?;
        probe[i] = point[i] - eps;
        let (minus, _) = f(&probe)?;
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("objective is non-finite when probing coordinate {i}")));
        }
        numeric.push((plus - minus) / (2.0 * eps));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
