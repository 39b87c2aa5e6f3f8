use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Compares the analytic gradient returned by `f` against central
/// differences on every entry of every parameter matrix.
///
/// The numeric derivative is the five-point central stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, whose O(h⁴)
/// truncation lets `h` stay large enough that roundoff in `f` does not
/// swamp small gradient entries.
///
/// `f` maps a parameter set to `(value, gradients)`, one gradient matrix
/// per parameter in the same order. The result is
/// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Matrix], epsilon: f64) -> Result<f64>
where
    F: Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidParameter(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }

    let mut probe = params.to_vec();
    let eval_at = |probe: &mut [Matrix], pi: usize, k: usize, x: f64| -> Result<f64> {
        probe[pi].data_mut()[k] = x;
        let (v, _) = f(probe)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.data().len() {
            let orig = params[pi].data()[k];
            let h = epsilon;
            let p1 = eval_at(&mut probe, pi, k, orig + h)?;
            let m1 = eval_at(&mut probe, pi, k, orig - h)?;
            let p2 = eval_at(&mut probe, pi, k, orig + 2.0 * h)?;
            let m2 = eval_at(&mut probe, pi, k, orig - 2.0 * h)?;
            probe[pi].data_mut()[k] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
