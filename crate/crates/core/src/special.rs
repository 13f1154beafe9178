//! Scalar special functions.

use core::f64::consts::{LN_2, PI, SQRT_2};
#[allow(unused_imports)]
use num_traits::Float;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Euler-Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)`, finite for all finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

pub fn log_factorial(k: f64) -> f64 {
    ln_gamma(k + 1.0)
}

pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `log Φ(x)`, accurate in both tails.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x > 0.0 {
        (-0.5 * libm::erfc(x / SQRT_2)).ln_1p()
    } else {
        (0.5 * libm::erfc(-x / SQRT_2)).ln()
    }
}

/// `E[log w]` for `w ~ Rayleigh` with scale-squared `s2`.
pub fn rayleigh_mean_log(s2: f64) -> f64 {
    0.5 * s2.ln() + 0.5 * (LN_2 - EULER_GAMMA)
}

/// `E[1/w]` for `w ~ Rayleigh` with scale-squared `s2`.
pub fn rayleigh_mean_inverse(s2: f64) -> f64 {
    (PI / 2.0).sqrt() / s2.sqrt()
}
