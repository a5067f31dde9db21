//! Central finite differences, used as an independent gradient oracle.

use super::params::ParamVector;
use crate::error::{Error, Result};

/// Per-coordinate central differences `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`.
pub fn finite_diff_grad<F>(f: F, params: &ParamVector, eps: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Validation(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    let base = params.flatten();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let plus = f(&params.unflatten(&probe)?)?;
        probe[i] = base[i] - eps;
        let minus = f(&params.unflatten(&probe)?)?;
        probe[i] = base[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    params.unflatten(&grad)
}

/// Normwise relative error `||a - b|| / max(||a||, ||b||)`.
///
/// Returns 0 when both vectors are exactly zero.
pub fn relative_error(analytic: &ParamVector, numeric: &ParamVector) -> f64 {
    relative_error_flat(&analytic.flatten(), &numeric.flatten())
}

pub fn relative_error_flat(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}
