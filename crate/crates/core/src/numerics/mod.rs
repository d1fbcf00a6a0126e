//! Deterministic special functions, matrix utilities, an unconstrained
//! quasi-Newton optimizer, and reproducible random-number streams. Everything
//! else in the crate is built on top of this module.
//!
//! All transcendental evaluations go through `libm` so that sequences of
//! draws and quadrature values are bit-identical across platforms.

pub mod bvn;
pub mod draws;
pub mod matrix;
pub mod normal;
pub mod optimize;
pub mod rng;

pub use bvn::bvn_cdf;
pub use matrix::{nearest_psd, SpdMatrix};
pub use normal::{
    fisher_z, fisher_z_inv, inverse_mills, log_std_normal_cdf, std_normal_cdf, std_normal_pdf,
    std_normal_quantile,
};
pub use optimize::{minimize, MinimizeOptions, MinimizeResult};
pub use rng::RngStream;

use crate::error::Error;

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self, Error> {
        if value.is_nan() || !(0.0..=1.0).contains(&value) {
            return Err(Error::Domain(format!("probability {value} not in [0,1]")));
        }
        Ok(Self(value))
    }

    /// Clamp tiny numerical overshoot into `[0, 1]`; NaN is still a bug.
    pub(crate) fn new_clamped(value: f64) -> Self {
        debug_assert!(!value.is_nan());
        Self(value.clamp(0.0, 1.0))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// A correlation strictly inside `(-1, 1)`, so `fisher_z` is always finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Correlation(f64);

impl Correlation {
    pub fn new(value: f64) -> Result<Self, Error> {
        if !value.is_finite() || value.abs() >= 1.0 {
            return Err(Error::Domain(format!(
                "correlation {value} not strictly inside (-1,1)"
            )));
        }
        Ok(Self(value))
    }

    /// Clamp into the open interval; used where the source value is a `tanh`
    /// output that may have rounded to exactly +/-1.
    pub(crate) fn new_clamped(value: f64) -> Self {
        debug_assert!(!value.is_nan());
        let bound = 1.0 - f64::EPSILON;
        Self(value.clamp(-bound, bound))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<Correlation> for f64 {
    fn from(r: Correlation) -> f64 {
        r.0
    }
}
