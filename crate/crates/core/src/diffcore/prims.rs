//! Scalar and vector primitives shared by every layer.
//!
//! GELU uses the exact error-function form `x·Φ(x)` everywhere in the
//! crate; there is no tanh approximation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

use super::matrix::{dot, norm};

/// Norm floor used by [`cosine_sim`] and row normalization.
pub const COSINE_EPS: f64 = 1e-12;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx of `x·Φ(x)` = Φ(x) + x·φ(x).
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Temperature softmax. Entries equal to `-inf` are masked out and come
/// back as exactly zero.
pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("softmax temperature {tau}")));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, tau, &mut out)?;
    Ok(out)
}

/// [`softmax`] writing into a caller-provided buffer.
pub fn softmax_into(v: &[f64], tau: f64, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(v.len(), out.len());
    let max = v
        .iter()
        .copied()
        .filter(|x| *x != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySoftmaxSupport);
    }
    if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = if x == f64::NEG_INFINITY {
            0.0
        } else {
            ((x - max) / tau).exp()
        };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

/// `a·b / (max(‖a‖, ε)·max(‖b‖, ε))`. A zero vector scores 0 against
/// anything.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    dot(a, b) / (norm(a).max(COSINE_EPS) * norm(b).max(COSINE_EPS))
}
