//! The two stochastic imputation steps: draw marginal parameters from their
//! approximate posterior, shrink to cluster-specific draws (falling back to
//! purely marginal draws for clusters without usable information), and draw
//! the missing values themselves.

use crate::error::Error;
use crate::heckman::{ClusterFit, Family};
use crate::meta::{vech_indices, MarginalModel, MetaFit};
use crate::numerics::draws::{draw_bernoulli, draw_mvnormal, draw_normal};
use crate::numerics::matrix::{nearest_psd, SpdMatrix};
use crate::numerics::normal::{inverse_mills, std_normal_cdf};
use crate::numerics::{bvn_cdf, Correlation, RngStream};
use nalgebra::{DMatrix, DVector};

/// Ridge added to ψ* and S_θᵢ before precision inversions.
const POSTERIOR_RIDGE: f64 = 1e-8;

/// One realization of the marginal parameters Θ* and between-cluster
/// covariances ψ*.
#[derive(Debug, Clone)]
pub struct DrawnMarginal {
    pub family: Family,
    pub theta_o: DVector<f64>,
    pub psi_o: SpdMatrix,
    pub theta_s: Option<DVector<f64>>,
    pub psi_s: Option<SpdMatrix>,
    pub theta_log_sigma: Option<f64>,
    pub psi_log_sigma: Option<f64>,
    pub theta_atanh_rho: Option<f64>,
    pub psi_atanh_rho: Option<f64>,
    /// Frobenius distance moved by the PSD projection of the raw ψ* draws;
    /// nonzero values flag draws that landed outside the PSD cone.
    pub projection_distance: f64,
}

/// Cluster-specific parameter draw on the original scale.
#[derive(Debug, Clone)]
pub struct DrawnClusterParams {
    pub cluster_id: String,
    pub beta_o_star: DVector<f64>,
    /// Empty when the model carries no selection equation.
    pub beta_s_star: DVector<f64>,
    pub sigma_star: Option<f64>,
    pub rho_star: Correlation,
}

fn draw_theta_block(fit: &MetaFit, rng: &mut RngStream) -> Result<DVector<f64>, Error> {
    draw_mvnormal(rng, &fit.theta_hat, &fit.s_theta)
}

/// ψ* for a matrix block: elementwise normal draws on the distinct elements,
/// symmetrized and PSD-projected. Returns the draw and the projection
/// distance.
fn draw_psi_block(fit: &MetaFit, rng: &mut RngStream) -> Result<(SpdMatrix, f64), Error> {
    let d = fit.psi_hat.dim();
    let pairs = vech_indices(d);
    let mut raw = DMatrix::zeros(d, d);
    for (e, &(i, j)) in pairs.iter().enumerate() {
        let sd = fit.s_psi.as_matrix()[(e, e)].max(0.0).sqrt();
        let v = draw_normal(rng, fit.psi_hat.as_matrix()[(i, j)], sd)?;
        raw[(i, j)] = v;
        raw[(j, i)] = v;
    }
    let projected = nearest_psd(&raw)?;
    let dist = (projected.as_matrix() - &raw).norm();
    Ok((projected, dist))
}

fn draw_psi_scalar(fit: &MetaFit, rng: &mut RngStream) -> Result<f64, Error> {
    let sd = fit.s_psi.as_matrix()[(0, 0)].max(0.0).sqrt();
    // scalar heterogeneity draws are truncated at zero
    Ok(draw_normal(rng, fit.psi_hat.as_matrix()[(0, 0)], sd)?.max(0.0))
}

/// Θ* ~ N(Θ̂, Ŝ_Θ) blockwise and ψ* ~ N(ψ̂, Ŝ_ψ) elementwise with PSD
/// projection (scalars truncated at zero).
pub fn draw_marginal(model: &MarginalModel, rng: &mut RngStream) -> Result<DrawnMarginal, Error> {
    let theta_o = draw_theta_block(&model.block_o, rng)?;
    let theta_s = model
        .block_s
        .as_ref()
        .map(|b| draw_theta_block(b, rng))
        .transpose()?;
    let theta_log_sigma = model
        .meta_log_sigma
        .as_ref()
        .map(|b| {
            let sd = b.s_theta.as_matrix()[(0, 0)].max(0.0).sqrt();
            draw_normal(rng, b.theta_hat[0], sd)
        })
        .transpose()?;
    let theta_atanh_rho = model
        .meta_atanh_rho
        .as_ref()
        .map(|b| {
            let sd = b.s_theta.as_matrix()[(0, 0)].max(0.0).sqrt();
            draw_normal(rng, b.theta_hat[0], sd)
        })
        .transpose()?;

    let mut projection_distance = 0.0;
    let (psi_o, d0) = draw_psi_block(&model.block_o, rng)?;
    projection_distance += d0;
    let psi_s = match &model.block_s {
        Some(b) => {
            let (m, d1) = draw_psi_block(b, rng)?;
            projection_distance += d1;
            Some(m)
        }
        None => None,
    };
    let psi_log_sigma = model
        .meta_log_sigma
        .as_ref()
        .map(|b| draw_psi_scalar(b, rng))
        .transpose()?;
    let psi_atanh_rho = model
        .meta_atanh_rho
        .as_ref()
        .map(|b| draw_psi_scalar(b, rng))
        .transpose()?;

    Ok(DrawnMarginal {
        family: model.family,
        theta_o,
        psi_o,
        theta_s,
        psi_s,
        theta_log_sigma,
        psi_log_sigma,
        theta_atanh_rho,
        psi_atanh_rho,
        projection_distance,
    })
}

/// Precision-weighted posterior draw for one block:
/// mean (ψ*⁻¹+S⁻¹)⁻¹(ψ*⁻¹Θ* + S⁻¹θ̂ᵢ), covariance (ψ*⁻¹+S⁻¹)⁻¹.
fn posterior_block(
    rng: &mut RngStream,
    theta_star: &DVector<f64>,
    psi_star: &SpdMatrix,
    theta_i: &DVector<f64>,
    s_i: &SpdMatrix,
) -> Result<DVector<f64>, Error> {
    let d = theta_star.len();
    let ridge_inv = |m: &SpdMatrix| -> Result<DMatrix<f64>, Error> {
        let mut a = m.as_matrix().clone();
        for i in 0..d {
            a[(i, i)] += POSTERIOR_RIDGE;
        }
        nalgebra::Cholesky::new(a)
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Domain("posterior precision not invertible".into()))
    };
    let a_inv = ridge_inv(psi_star)?;
    let b_inv = ridge_inv(s_i)?;
    let precision = &a_inv + &b_inv;
    let cov = nalgebra::Cholesky::new(precision)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Domain("posterior covariance not invertible".into()))?;
    let cov = nearest_psd(&(0.5 * (&cov + cov.transpose())))?;
    let mean = cov.as_matrix() * (&a_inv * theta_star + &b_inv * theta_i);
    draw_mvnormal(rng, &mean, &cov)
}

fn scalar_block(
    rng: &mut RngStream,
    theta_star: f64,
    psi_star: f64,
    fit_value: Option<(f64, f64)>,
) -> Result<f64, Error> {
    match fit_value {
        Some((theta_i, var_i)) => {
            let a_inv = 1.0 / (psi_star + POSTERIOR_RIDGE);
            let b_inv = 1.0 / (var_i + POSTERIOR_RIDGE);
            let cov = 1.0 / (a_inv + b_inv);
            let mean = cov * (a_inv * theta_star + b_inv * theta_i);
            draw_normal(rng, mean, cov.max(0.0).sqrt())
        }
        None => draw_normal(rng, theta_star, psi_star.max(0.0).sqrt()),
    }
}

/// Draw the shrunken cluster parameters θ*ᵢ. With a usable fit this is the
/// blockwise precision-weighted posterior; without one (systematic
/// missingness or a non-estimable cluster) the draw comes from N(Θ*, ψ*)
/// alone. σ and ρ are returned back-transformed.
pub fn draw_cluster(
    cluster_id: &str,
    fit: Option<&ClusterFit>,
    marginal: &DrawnMarginal,
    rng: &mut RngStream,
) -> Result<DrawnClusterParams, Error> {
    let p = marginal.theta_o.len();
    let beta_o_star = match fit {
        Some(f) => {
            let s_i = f.vcov.principal_submatrix(0..p);
            posterior_block(rng, &marginal.theta_o, &marginal.psi_o, &f.params.beta_o, &s_i)?
        }
        None => draw_mvnormal(rng, &marginal.theta_o, &marginal.psi_o)?,
    };

    let beta_s_star = match (&marginal.theta_s, &marginal.psi_s) {
        (Some(theta_s), Some(psi_s)) => {
            let q = theta_s.len();
            match fit {
                Some(f) => {
                    let s_i = f.vcov.principal_submatrix(p..p + q);
                    posterior_block(rng, theta_s, psi_s, &f.params.beta_s, &s_i)?
                }
                None => draw_mvnormal(rng, theta_s, psi_s)?,
            }
        }
        _ => DVector::zeros(0),
    };

    let q = beta_s_star.len();
    let sigma_star = match (marginal.theta_log_sigma, marginal.psi_log_sigma) {
        (Some(theta), Some(psi)) => {
            let idx = p + q;
            let fit_value = fit.map(|f| {
                (
                    f.params.log_sigma.expect("family carries sigma"),
                    f.vcov.as_matrix()[(idx, idx)],
                )
            });
            Some(libm::exp(scalar_block(rng, theta, psi, fit_value)?))
        }
        _ => None,
    };

    let rho_star = match (marginal.theta_atanh_rho, marginal.psi_atanh_rho) {
        (Some(theta), Some(psi)) => {
            let idx = match marginal.family {
                Family::Continuous => p + q + 1,
                Family::Binary => p + q,
            };
            let fit_value = fit.map(|f| (f.params.atanh_rho, f.vcov.as_matrix()[(idx, idx)]));
            Correlation::new_clamped(libm::tanh(scalar_block(rng, theta, psi, fit_value)?))
        }
        _ => Correlation::new_clamped(0.0),
    };

    Ok(DrawnClusterParams {
        cluster_id: cluster_id.to_string(),
        beta_o_star,
        beta_s_star,
        sigma_star,
        rho_star,
    })
}

/// Selection-corrected conditional mean for an unobserved continuous row:
/// μ = xᵒβᵒ* + ρ*σ*·(-φ(xˢβˢ*)/Φ(-xˢβˢ*)).
pub fn continuous_conditional_mean(eta_o: f64, eta_s: f64, rho: f64, sigma: f64) -> f64 {
    eta_o - rho * sigma * inverse_mills(-eta_s)
}

/// Conditional success probability for an unobserved binary row:
/// p* = Φ₂(xᵒβᵒ*, -xˢβˢ*; -ρ*)/Φ(-xˢβˢ*), clamped into [0,1]. The second
/// element reports the denominator-underflow fallback p* = Φ(xᵒβᵒ*).
pub fn binary_missing_probability(eta_o: f64, eta_s: f64, rho: f64) -> (f64, bool) {
    let denom = std_normal_cdf(-eta_s).value();
    if denom < 1e-300 {
        // selection probability ~ 1 yet the row is missing; fall back to the
        // unconditional success probability
        return (std_normal_cdf(eta_o).value(), true);
    }
    let num = bvn_cdf(eta_o, -eta_s, Correlation::new_clamped(-rho)).value();
    ((num / denom).clamp(0.0, 1.0), false)
}

/// Draw imputed values for continuous rows with r = 0.
pub fn impute_continuous(
    x_outcome: &DMatrix<f64>,
    x_selection: &DMatrix<f64>,
    params: &DrawnClusterParams,
    rng: &mut RngStream,
) -> Result<Vec<f64>, Error> {
    let sigma = params
        .sigma_star
        .ok_or_else(|| Error::Imputation("continuous imputation without sigma".into()))?;
    let rho = params.rho_star.value();
    let eta_o = x_outcome * &params.beta_o_star;
    let eta_s = if params.beta_s_star.len() > 0 {
        x_selection * &params.beta_s_star
    } else {
        DVector::zeros(x_outcome.nrows())
    };
    let mut out = Vec::with_capacity(x_outcome.nrows());
    for i in 0..x_outcome.nrows() {
        let mu = continuous_conditional_mean(eta_o[i], eta_s[i], rho, sigma);
        out.push(draw_normal(rng, mu, sigma)?);
    }
    Ok(out)
}

/// Draw imputed values for binary rows with r = 0. Returns the draws and the
/// number of denominator-underflow fallbacks.
pub fn impute_binary(
    x_outcome: &DMatrix<f64>,
    x_selection: &DMatrix<f64>,
    params: &DrawnClusterParams,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, usize), Error> {
    let rho = params.rho_star.value();
    let eta_o = x_outcome * &params.beta_o_star;
    let eta_s = if params.beta_s_star.len() > 0 {
        x_selection * &params.beta_s_star
    } else {
        DVector::zeros(x_outcome.nrows())
    };
    let mut out = Vec::with_capacity(x_outcome.nrows());
    let mut fallbacks = 0;
    for i in 0..x_outcome.nrows() {
        let (p, fell_back) = binary_missing_probability(eta_o[i], eta_s[i], rho);
        if fell_back {
            fallbacks += 1;
            log::warn!(
                "binary imputation: selection probability ~ 1 on a missing row; using marginal probability"
            );
        }
        out.push(f64::from(draw_bernoulli(rng, p)?));
    }
    Ok((out, fallbacks))
}
