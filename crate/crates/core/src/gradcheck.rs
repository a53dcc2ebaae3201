//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::TensorGrid;

/// Central-difference step used throughout the test-suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the per-coordinate relative error. Coordinates whose
/// analytic and numeric gradients are both below it are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient<F>(f: F, point: &TensorGrid, h: f64) -> Result<TensorGrid>
where
    F: Fn(&TensorGrid) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = point.clone();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let x = point.values()[i];
        probe.values_mut()[i] = x + h;
        let up = f(&probe)?;
        probe.values_mut()[i] = x - h;
        let down = f(&probe)?;
        probe.values_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!("function not finite near coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    TensorGrid::new(point.shape().to_vec(), grad)
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Largest per-coordinate relative error between `analytic` and the central-difference
/// gradient of `f` at `point`.
pub fn grad_check<F>(f: F, analytic: &TensorGrid, point: &TensorGrid, h: f64) -> Result<f64>
where
    F: Fn(&TensorGrid) -> Result<f64>,
{
    point.ensure_same_shape(analytic, "analytic gradient")?;
    let numeric = numeric_gradient(f, point, h)?;
    Ok(analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// `||a - n|| / max(||a||, ||n||)` over whole vectors; zero when both vanish.
pub fn vector_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
