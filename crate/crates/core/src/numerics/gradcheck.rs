use crate::error::{Error, Result};

/// Compares an analytic gradient with central finite differences.
///
/// Returns `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Range(format!("finite-difference step {h:e} outside [1e-7, 1e-3]")));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let up = f(&probe)?;
        probe[i] = params[i] - h;
        let down = f(&probe)?;
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite around coordinate {i}")));
        }
        let fd = (up - down) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
