//! Standard-normal functions used by the Thurstone solvers and TrueSkill.
//!
//! Below `z = -6` the lower tail is evaluated through Laplace's continued
//! fraction for the Mills ratio, so `log Φ` and `φ/Φ` stay finite far past the
//! point where `Φ` itself underflows.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;

use crate::error::{Error, Result};

const TAIL_SWITCH: f64 = -6.0;
const CF_DEPTH: usize = 120;

fn finite(z: f64) -> Result<f64> {
    if z.is_finite() {
        Ok(z)
    } else {
        Err(Error::NonFinite(z))
    }
}

/// Standard normal CDF Φ(z).
pub fn normal_cdf(z: f64) -> Result<f64> {
    finite(z).map(cdf)
}

/// `ln Φ(z)`, finite for every finite `z` down to well below -40.
pub fn log_normal_cdf(z: f64) -> Result<f64> {
    finite(z).map(log_cdf)
}

/// Inverse Mills ratio `φ(z)/Φ(z)` (TrueSkill's `v` function).
pub fn inverse_mills(z: f64) -> Result<f64> {
    finite(z).map(mills)
}

/// TrueSkill's `w(z) = v(z)(v(z) + z)`, the variance shrink factor of a
/// one-sided truncated Gaussian. Always in `(0, 1)`.
pub fn truncation_variance_factor(z: f64) -> Result<f64> {
    finite(z).map(mills_w)
}

#[inline]
pub(crate) fn pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub(crate) fn cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// Continued fraction for `x > 0`: returns `(1/R(x), 1/R(x) - x)` where
/// `R(x) = Φ(-x)/φ(x)` is Mills' ratio. The second value is computed without
/// the cancellation of subtracting `x`.
fn mills_tail(x: f64) -> (f64, f64) {
    // 1/R(x) = x + 1/(x + 2/(x + 3/(x + ...)))
    let mut t = x;
    for k in (2..=CF_DEPTH).rev() {
        t = x + k as f64 / t;
    }
    let excess = 1.0 / t;
    (x + excess, excess)
}

pub(crate) fn log_cdf(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        let x = -z;
        let (_, excess) = mills_tail(x);
        // -z²/2 - ln(-z) - ½ln(2π) + ln(x·R(x)), with x·R(x) = 1/(1 + excess/x)
        -0.5 * z * z - x.ln() - 0.5 * (2.0 * PI).ln() - (excess / x).ln_1p()
    } else if z > 0.0 {
        (-0.5 * erfc(z * FRAC_1_SQRT_2)).ln_1p()
    } else {
        cdf(z).ln()
    }
}

pub(crate) fn mills(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        mills_tail(-z).0
    } else {
        pdf(z) / cdf(z)
    }
}

pub(crate) fn mills_w(z: f64) -> f64 {
    if z < TAIL_SWITCH {
        let (v, excess) = mills_tail(-z);
        v * excess
    } else {
        let v = mills(z);
        v * (v + z)
    }
}
