//! Central-difference gradient checking.

use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("f({i} +/- h) = {up} / {down}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!("{} inputs vs {} analytic gradients", x.len(), analytic.len())));
    }
    let numeric = numerical_gradient(f, x, h)?;
    Ok(numeric.iter().zip(analytic).map(|(n, a)| (a - n).abs() / a.abs().max(1.0)).fold(0.0, f64::max))
}
