//! Univariate standard-normal functions: density, CDF, log-CDF, quantile,
//! the inverse Mills ratio, and the Fisher z transform.

use super::{Correlation, Probability};
use crate::error::Error;

const INV_SQRT_2PI: f64 = 0.3989422804014326779399461;
const LOG_INV_SQRT_2PI: f64 = -0.9189385332046727417803297;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// φ(x) = (2π)^(-1/2) exp(-x²/2).
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

#[inline]
pub fn log_std_normal_pdf(x: f64) -> f64 {
    LOG_INV_SQRT_2PI - 0.5 * x * x
}

/// Φ(x) via the complementary error function; accepts ±∞.
#[inline]
pub fn std_normal_cdf(x: f64) -> Probability {
    debug_assert!(!x.is_nan());
    Probability::new_clamped(0.5 * libm::erfc(-x * FRAC_1_SQRT_2))
}

/// Asymptotic factor for the lower tail, valid for x ≤ -8:
/// Φ(x) = φ(x)/|x| · (1 - 1/x² + 3/x⁴ - 15/x⁶ + 105/x⁸ - …).
#[inline]
fn lower_tail_series(x: f64) -> f64 {
    let ix2 = 1.0 / (x * x);
    1.0 + ix2
        * (-1.0
            + ix2 * (3.0 + ix2 * (-15.0 + ix2 * (105.0 + ix2 * (-945.0 + ix2 * 10395.0)))))
}

/// log Φ(x), stable over the whole real line. `erfc` keeps full precision
/// down to x ≈ -34; beyond that the asymptotic expansion takes over.
pub fn log_std_normal_cdf(x: f64) -> f64 {
    if x < -34.0 {
        log_std_normal_pdf(x) - libm::log(-x) + libm::log(lower_tail_series(x))
    } else {
        libm::log(0.5 * libm::erfc(-x * FRAC_1_SQRT_2))
    }
}

/// Φ⁻¹(p) for p strictly inside (0, 1).
///
/// Acklam's rational approximation polished with one Newton step against the
/// `erfc`-based CDF, which brings the absolute error below 1e-14.
pub fn std_normal_quantile(p: Probability) -> Result<f64, Error> {
    let p = p.value();
    if p <= 0.0 || p >= 1.0 {
        return Err(Error::Domain(format!(
            "normal quantile requires p in (0,1), got {p}"
        )));
    }

    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.38357751867269e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = libm::sqrt(-2.0 * libm::log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // One Newton polish; the density is bounded away from zero for |x| < 39.
    let err = std_normal_cdf(x).value() - p;
    let pdf = std_normal_pdf(x);
    Ok(if pdf > 0.0 { x - err / pdf } else { x })
}

/// Inverse Mills ratio φ(x)/Φ(x). Below x = -8 the ratio is evaluated through
/// the tail expansion, which avoids the 0/0 of the direct quotient.
pub fn inverse_mills(x: f64) -> f64 {
    debug_assert!(x.is_finite());
    if x < -8.0 {
        -x / lower_tail_series(x)
    } else {
        std_normal_pdf(x) / std_normal_cdf(x).value()
    }
}

/// tanh⁻¹(ρ).
#[inline]
pub fn fisher_z(rho: Correlation) -> f64 {
    libm::atanh(rho.value())
}

/// tanh(z), clamped into the open interval since tanh rounds to ±1 for
/// |z| ≳ 19.
#[inline]
pub fn fisher_z_inv(z: f64) -> Correlation {
    Correlation::new_clamped(libm::tanh(z))
}
