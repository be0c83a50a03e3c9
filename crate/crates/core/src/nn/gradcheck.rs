use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// Returns `max_k |g_ad[k] − g_fd[k]| / max(|g_fd[k]|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Shape {
            context: "finite_diff_check (gradient length)",
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    let fd = central_differences(&mut f, x, step)?;
    Ok(max_relative_discrepancy(analytic, &fd))
}

pub fn central_differences<F>(f: &mut F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        // Divide by the representable spacing, not 2·step.
        let (hi, lo) = (x[k] + step, x[k] - step);
        probe[k] = hi;
        let plus = f(&probe)?;
        probe[k] = lo;
        let minus = f(&probe)?;
        probe[k] = x[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {k} (±{step})"
            )));
        }
        out.push((plus - minus) / (hi - lo));
    }
    Ok(out)
}

pub fn max_relative_discrepancy(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, d)| (a - d).abs() / d.abs().max(1e-8))
        .fold(0.0, f64::max)
}
