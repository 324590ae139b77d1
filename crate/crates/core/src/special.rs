//! Standard normal density, distribution and the inverse Mills ratio.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// φ(x)/Φ(x), accurate far into the lower tail.
pub fn mills_ratio(x: f64) -> f64 {
    if x > -30.0 {
        let cdf = norm_cdf(x);
        if cdf > 0.0 {
            return norm_pdf(x) / cdf;
        }
    }
    // Asymptotic continued fraction for Φ(x)/φ(x) when x << 0.
    let z = -x;
    let mut tail = 0.0;
    for k in (1..=40).rev() {
        tail = k as f64 / (z + tail);
    }
    z + tail
}

/// log Φ(x) without underflow.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        -0.5 * x * x - 0.5 * LN_2PI - mills_ratio(x).ln()
    }
}
