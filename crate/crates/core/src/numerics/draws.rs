//! Distribution draws on top of [`RngStream`].
//!
//! Normals are generated by inverse-CDF so a stream's output is a pure
//! function of its uniforms; the chi-square uses the Marsaglia-Tsang gamma
//! rejection sampler and the bivariate skew-t its stochastic representation
//! (a sign-flipped conditional normal divided by sqrt(chi2/df)).

use super::matrix::SpdMatrix;
use super::normal::std_normal_quantile;
use super::rng::RngStream;
use super::Probability;
use crate::error::Error;
use nalgebra::{DMatrix, DVector};

pub fn draw_std_normal(stream: &mut RngStream) -> f64 {
    let u = Probability::new_clamped(stream.uniform());
    // uniform() is strictly inside (0,1), so the quantile cannot fail
    std_normal_quantile(u).expect("open-interval uniform")
}

pub fn draw_normal(stream: &mut RngStream, mean: f64, sd: f64) -> Result<f64, Error> {
    if !(sd >= 0.0) || !sd.is_finite() || !mean.is_finite() {
        return Err(Error::Domain(format!("normal(mean={mean}, sd={sd})")));
    }
    Ok(mean + sd * draw_std_normal(stream))
}

pub fn draw_mvnormal(
    stream: &mut RngStream,
    mean: &DVector<f64>,
    cov: &SpdMatrix,
) -> Result<DVector<f64>, Error> {
    if mean.len() != cov.dim() {
        return Err(Error::Domain(format!(
            "mvnormal dimension mismatch: mean {} vs cov {}",
            mean.len(),
            cov.dim()
        )));
    }
    let f = cov.factor();
    let z = DVector::from_fn(mean.len(), |_, _| draw_std_normal(stream));
    Ok(mean + f * z)
}

pub fn draw_bernoulli(stream: &mut RngStream, p: f64) -> Result<bool, Error> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("bernoulli p={p} not in [0,1]")));
    }
    Ok(stream.uniform() < p)
}

/// Gamma(shape, scale) via Marsaglia-Tsang; shape < 1 uses the boost step.
fn draw_gamma(stream: &mut RngStream, shape: f64, scale: f64) -> f64 {
    debug_assert!(shape > 0.0 && scale > 0.0);
    if shape < 1.0 {
        let g = draw_gamma(stream, shape + 1.0, 1.0);
        let u = stream.uniform();
        return scale * g * libm::pow(u, 1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / libm::sqrt(9.0 * d);
    loop {
        let x = draw_std_normal(stream);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u = stream.uniform();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2
            || libm::log(u) < 0.5 * x2 + d * (1.0 - v + libm::log(v))
        {
            return scale * d * v;
        }
    }
}

pub fn draw_chisq(stream: &mut RngStream, df: f64) -> Result<f64, Error> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::Domain(format!("chi-square df={df}")));
    }
    Ok(draw_gamma(stream, df / 2.0, 2.0))
}

/// One draw from the bivariate skew-t with the given 2x2 scale matrix, shape
/// vector alpha, and df degrees of freedom.
///
/// Construction: standardize the scale to a correlation matrix R, set
/// delta = R·alpha / sqrt(1 + alpha'·R·alpha), draw (u0, u) from the 3-d
/// normal with correlation [[1, delta'], [delta, R]], flip the sign of u when
/// u0 <= 0 (skew-normal), rescale by the scale-matrix standard deviations,
/// and divide by sqrt(chi2_df / df).
pub fn draw_bvn_skew_t(
    stream: &mut RngStream,
    scale: &SpdMatrix,
    alpha: (f64, f64),
    df: f64,
) -> Result<(f64, f64), Error> {
    if scale.dim() != 2 {
        return Err(Error::Domain("skew-t scale matrix must be 2x2".into()));
    }
    if !(df > 0.0) || !df.is_finite() {
        return Err(Error::Domain(format!("skew-t df={df}")));
    }
    let s = scale.as_matrix();
    let (s11, s22, s12) = (s[(0, 0)], s[(1, 1)], s[(0, 1)]);
    if s11 <= 0.0 || s22 <= 0.0 {
        return Err(Error::Domain("skew-t scale has zero variance".into()));
    }
    let (w1, w2) = (libm::sqrt(s11), libm::sqrt(s22));
    let r12 = (s12 / (w1 * w2)).clamp(-1.0 + 1e-12, 1.0 - 1e-12);

    let a = DVector::from_column_slice(&[alpha.0, alpha.1]);
    let rbar = DMatrix::from_row_slice(2, 2, &[1.0, r12, r12, 1.0]);
    let ra = &rbar * &a;
    let denom = libm::sqrt(1.0 + a.dot(&ra));
    let delta = ra / denom;

    let omega = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0, delta[0], delta[1], //
            delta[0], 1.0, r12, //
            delta[1], r12, 1.0,
        ],
    );
    let omega = super::matrix::nearest_psd(&omega)?;
    let u = draw_mvnormal(stream, &DVector::zeros(3), &omega)?;
    let sign = if u[0] > 0.0 { 1.0 } else { -1.0 };
    let z1 = sign * u[1];
    let z2 = sign * u[2];

    let w = draw_chisq(stream, df)? / df;
    let t = libm::sqrt(w);
    Ok((w1 * z1 / t, w2 * z2 / t))
}
