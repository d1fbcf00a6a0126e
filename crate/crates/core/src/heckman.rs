//! Cluster-level selection-model estimation.
//!
//! A cluster is modelled by an outcome equation y* = Xᵒβᵒ + εᵒ and a probit
//! selection equation r* = Xˢβˢ + εˢ with bivariate-normal errors of
//! correlation ρ and outcome standard deviation σ (the selection error is
//! fixed at unit variance). y is observed exactly where r = I(r* ≥ 0) is 1.
//! Estimation is full-information maximum likelihood on the unconstrained
//! scale (β, log σ, atanh ρ); the within-cluster covariance is the inverse
//! negative Hessian at the optimum.

use crate::error::{Error, NonEstimable};
use crate::numerics::matrix::SpdMatrix;
use crate::numerics::normal::{
    inverse_mills, log_std_normal_cdf, log_std_normal_pdf, std_normal_cdf, std_normal_pdf,
};
use crate::numerics::optimize::{minimize, MinimizeOptions};
use crate::numerics::{bvn_cdf, Correlation};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// |atanh ρ| at which a fit is declared boundary-degenerate (ρ = 0.99).
pub const ATANH_RHO_BOUND: f64 = 2.6466524123622457;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Continuous,
    Binary,
}

/// One cluster's design and response. `y` is only meaningful on rows with
/// `r = true`; unobserved entries may be NaN.
#[derive(Debug, Clone)]
pub struct ClusterData {
    pub cluster_id: String,
    pub x_outcome: DMatrix<f64>,
    pub x_selection: DMatrix<f64>,
    pub y: DVector<f64>,
    pub r: Vec<bool>,
}

impl ClusterData {
    pub fn new(
        cluster_id: impl Into<String>,
        x_outcome: DMatrix<f64>,
        x_selection: DMatrix<f64>,
        y: DVector<f64>,
        r: Vec<bool>,
    ) -> Result<Self, Error> {
        let n = r.len();
        if n == 0 {
            return Err(Error::Data("cluster has no rows".into()));
        }
        if x_outcome.nrows() != n || x_selection.nrows() != n || y.len() != n {
            return Err(Error::Data(format!(
                "row mismatch: r={n}, x_outcome={}, x_selection={}, y={}",
                x_outcome.nrows(),
                x_selection.nrows(),
                y.len()
            )));
        }
        if x_outcome.ncols() == 0 || x_selection.ncols() == 0 {
            return Err(Error::Data("empty design matrix".into()));
        }
        for i in 0..n {
            if r[i] && !y[i].is_finite() {
                return Err(Error::Data(format!(
                    "row {i} is marked observed but y is not finite"
                )));
            }
        }
        Ok(Self {
            cluster_id: cluster_id.into(),
            x_outcome,
            x_selection,
            y,
            r,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.r.len()
    }

    pub fn n_observed(&self) -> usize {
        self.r.iter().filter(|&&b| b).count()
    }
}

/// Parameters on the unconstrained scale. `log_sigma` is absent for the
/// binary family.
#[derive(Debug, Clone, PartialEq)]
pub struct HeckmanParams {
    pub beta_o: DVector<f64>,
    pub beta_s: DVector<f64>,
    pub log_sigma: Option<f64>,
    pub atanh_rho: f64,
}

impl HeckmanParams {
    pub fn sigma(&self) -> Option<f64> {
        self.log_sigma.map(libm::exp)
    }

    pub fn rho(&self) -> Correlation {
        Correlation::new_clamped(libm::tanh(self.atanh_rho))
    }

    pub fn dim(&self) -> usize {
        self.beta_o.len() + self.beta_s.len() + usize::from(self.log_sigma.is_some()) + 1
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend(self.beta_o.iter());
        v.extend(self.beta_s.iter());
        if let Some(ls) = self.log_sigma {
            v.push(ls);
        }
        v.push(self.atanh_rho);
        DVector::from_vec(v)
    }

    pub fn from_vector(v: &DVector<f64>, p: usize, q: usize, family: Family) -> Self {
        let log_sigma = match family {
            Family::Continuous => Some(v[p + q]),
            Family::Binary => None,
        };
        Self {
            beta_o: DVector::from_iterator(p, v.iter().take(p).copied()),
            beta_s: DVector::from_iterator(q, v.iter().skip(p).take(q).copied()),
            log_sigma,
            atanh_rho: v[v.len() - 1],
        }
    }
}

/// A fitted cluster: transformed-scale estimates with their sampling
/// covariance (dimension p+q+2 continuous, p+q+1 binary).
#[derive(Debug, Clone)]
pub struct ClusterFit {
    pub cluster_id: String,
    pub params: HeckmanParams,
    pub vcov: SpdMatrix,
    pub converged: bool,
    pub n_obs: usize,
    pub family: Family,
}

#[inline]
fn rho_terms(atanh_rho: f64) -> (f64, f64) {
    let rho = libm::tanh(atanh_rho).clamp(-(1.0 - 1e-15), 1.0 - 1e-15);
    (rho, libm::sqrt(1.0 - rho * rho))
}

/// Log-likelihood of the continuous selection model:
///
/// Σ_{r=0} log Φ(-xˢβˢ) + Σ_{r=1} [log φ((y-xᵒβᵒ)/σ) - log σ
///   + log Φ((xˢβˢ + ρ(y-xᵒβᵒ)/σ)/√(1-ρ²))]
pub fn loglik_continuous(params: &HeckmanParams, data: &ClusterData) -> f64 {
    let log_sigma = params.log_sigma.expect("continuous family carries sigma");
    let sigma = libm::exp(log_sigma);
    let (rho, sq) = rho_terms(params.atanh_rho);
    let eta_o = &data.x_outcome * &params.beta_o;
    let eta_s = &data.x_selection * &params.beta_s;
    let mut ll = 0.0;
    for i in 0..data.n_rows() {
        if data.r[i] {
            let z = (data.y[i] - eta_o[i]) / sigma;
            ll += log_std_normal_pdf(z) - log_sigma
                + log_std_normal_cdf((eta_s[i] + rho * z) / sq);
        } else {
            ll += log_std_normal_cdf(-eta_s[i]);
        }
    }
    ll
}

/// Analytic gradient of [`loglik_continuous`] on the transformed scale
/// (βᵒ, βˢ, log σ, atanh ρ).
pub fn loglik_continuous_grad(params: &HeckmanParams, data: &ClusterData) -> DVector<f64> {
    let log_sigma = params.log_sigma.expect("continuous family carries sigma");
    let sigma = libm::exp(log_sigma);
    let (rho, sq) = rho_terms(params.atanh_rho);
    let p = params.beta_o.len();
    let q = params.beta_s.len();
    let eta_o = &data.x_outcome * &params.beta_o;
    let eta_s = &data.x_selection * &params.beta_s;
    let mut g = DVector::zeros(p + q + 2);
    for i in 0..data.n_rows() {
        if data.r[i] {
            let z = (data.y[i] - eta_o[i]) / sigma;
            let u = (eta_s[i] + rho * z) / sq;
            let lam = inverse_mills(u);
            let coef_o = (z - lam * rho / sq) / sigma;
            for j in 0..p {
                g[j] += coef_o * data.x_outcome[(i, j)];
            }
            let coef_s = lam / sq;
            for j in 0..q {
                g[p + j] += coef_s * data.x_selection[(i, j)];
            }
            g[p + q] += z * z - 1.0 - lam * rho * z / sq;
            // du/drho = (z + rho*eta_s)/(1-rho^2)^{3/2}, times drho/d(atanh rho) = 1-rho^2
            g[p + q + 1] += lam * (z + rho * eta_s[i]) / sq;
        } else {
            let lam0 = inverse_mills(-eta_s[i]);
            for j in 0..q {
                g[p + j] -= lam0 * data.x_selection[(i, j)];
            }
        }
    }
    g
}

/// Log-likelihood of the binary selection model (bivariate probit with
/// sample selection). Cell probabilities: r=0 → Φ(-xˢβˢ);
/// r=1,y=1 → Φ₂(xᵒβᵒ, xˢβˢ; ρ); r=1,y=0 → Φ₂(-xᵒβᵒ, xˢβˢ; -ρ).
pub fn loglik_binary(params: &HeckmanParams, data: &ClusterData) -> f64 {
    let (rho, _) = rho_terms(params.atanh_rho);
    let eta_o = &data.x_outcome * &params.beta_o;
    let eta_s = &data.x_selection * &params.beta_s;
    let rho_pos = Correlation::new_clamped(rho);
    let rho_neg = Correlation::new_clamped(-rho);
    let mut ll = 0.0;
    for i in 0..data.n_rows() {
        if data.r[i] {
            let cell = if data.y[i] > 0.5 {
                bvn_cdf(eta_o[i], eta_s[i], rho_pos).value()
            } else {
                bvn_cdf(-eta_o[i], eta_s[i], rho_neg).value()
            };
            ll += libm::log(cell.max(1e-300));
        } else {
            ll += log_std_normal_cdf(-eta_s[i]);
        }
    }
    ll
}

/// Density of the standard bivariate normal.
#[inline]
fn bvn_pdf(a: f64, b: f64, rho: f64, sq: f64) -> f64 {
    let quad = (a * a - 2.0 * rho * a * b + b * b) / (sq * sq);
    libm::exp(-0.5 * quad) / (std::f64::consts::TAU * sq)
}

/// Analytic gradient of [`loglik_binary`] on (βᵒ, βˢ, atanh ρ), using
/// ∂Φ₂(a,b;ρ)/∂a = φ(a)·Φ((b-ρa)/√(1-ρ²)) and ∂Φ₂/∂ρ = φ₂(a,b;ρ).
pub fn loglik_binary_grad(params: &HeckmanParams, data: &ClusterData) -> DVector<f64> {
    let (rho, sq) = rho_terms(params.atanh_rho);
    let p = params.beta_o.len();
    let q = params.beta_s.len();
    let eta_o = &data.x_outcome * &params.beta_o;
    let eta_s = &data.x_selection * &params.beta_s;
    let rho_pos = Correlation::new_clamped(rho);
    let rho_neg = Correlation::new_clamped(-rho);
    let mut g = DVector::zeros(p + q + 1);
    let drho_dz = 1.0 - rho * rho;
    for i in 0..data.n_rows() {
        let s = eta_s[i];
        if !data.r[i] {
            let lam0 = inverse_mills(-s);
            for j in 0..q {
                g[p + j] -= lam0 * data.x_selection[(i, j)];
            }
            continue;
        }
        let o = eta_o[i];
        // signs: y=1 cell is Phi2(o, s; rho); y=0 cell is Phi2(-o, s; -rho)
        let (a, r_cell, sign_o, sign_rho) = if data.y[i] > 0.5 {
            (o, rho_pos, 1.0, 1.0)
        } else {
            (-o, rho_neg, -1.0, -1.0)
        };
        let r_val = r_cell.value();
        let cell = bvn_cdf(a, s, r_cell).value().max(1e-300);
        let da = std_normal_pdf(a) * std_normal_cdf((s - r_val * a) / sq).value();
        let db = std_normal_pdf(s) * std_normal_cdf((a - r_val * s) / sq).value();
        let drho = bvn_pdf(a, s, r_val, sq);
        for j in 0..p {
            g[j] += sign_o * da / cell * data.x_outcome[(i, j)];
        }
        for j in 0..q {
            g[p + j] += db / cell * data.x_selection[(i, j)];
        }
        g[p + q] += sign_rho * drho / cell * drho_dz;
    }
    g
}

/// Ordinary least squares with a ridge-protected normal-equation solve.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta: DVector<f64>,
    /// σ̂²(XᵀX)⁻¹ with σ̂² = RSS/(n-p).
    pub vcov: SpdMatrix,
    pub sigma2: f64,
    pub rss: f64,
    pub n: usize,
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit, Error> {
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return Err(Error::Data(format!("least squares needs n > p ({n} <= {p})")));
    }
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let (beta, xtx_inv) = solve_spd(&xtx, &xty)?;
    let resid = y - x * &beta;
    let rss = resid.norm_squared();
    let sigma2 = rss / (n - p) as f64;
    let vcov = crate::numerics::matrix::nearest_psd(&symmetrize(xtx_inv * sigma2))
        .unwrap_or_else(|_| SpdMatrix::zeros(p));
    Ok(OlsFit {
        beta,
        vcov,
        sigma2,
        rss,
        n,
    })
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    m
}

/// Solve A x = b for symmetric A, escalating a diagonal ridge until the
/// Cholesky succeeds. Returns (x, A⁻¹).
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>), Error> {
    let scale = a.amax().max(1.0);
    for ridge in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge * scale;
        }
        if let Some(chol) = nalgebra::Cholesky::new(m) {
            return Ok((chol.solve(b), chol.inverse()));
        }
    }
    Err(Error::Data("normal equations are singular".into()))
}

/// Probit regression by Fisher scoring.
#[derive(Debug, Clone)]
pub struct ProbitFit {
    pub beta: DVector<f64>,
    pub vcov: SpdMatrix,
    pub converged: bool,
    pub iterations: usize,
}

pub fn probit(y: &[f64], x: &DMatrix<f64>) -> Result<ProbitFit, NonEstimable> {
    let n = x.nrows();
    let k = x.ncols();
    let ones = y.iter().filter(|&&v| v > 0.5).count();
    if ones == 0 || ones == n {
        return Err(NonEstimable::DegenerateOutcome);
    }
    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = DMatrix::<f64>::identity(k, k);
    for iter in 0..100 {
        iterations = iter + 1;
        let eta = x * &beta;
        let mut grad = DVector::zeros(k);
        info = DMatrix::zeros(k, k);
        for i in 0..n {
            let e = eta[i];
            let phi = std_normal_pdf(e);
            let cdf = std_normal_cdf(e).value().clamp(1e-10, 1.0 - 1e-10);
            let resid = y[i] - cdf;
            let score = resid * phi / (cdf * (1.0 - cdf));
            let w = phi * phi / (cdf * (1.0 - cdf));
            for a in 0..k {
                let xa = x[(i, a)];
                grad[a] += score * xa;
                for b in a..k {
                    info[(a, b)] += w * xa * x[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let (step, _) = solve_spd(&info, &grad).map_err(|_| NonEstimable::Separation)?;
        if !step.iter().all(|v| v.is_finite()) {
            return Err(NonEstimable::Separation);
        }
        beta += &step;
        if beta.norm() > 1e4 {
            return Err(NonEstimable::Separation);
        }
        if step.norm() <= 1e-10 * (1.0 + beta.norm()) {
            converged = true;
            break;
        }
    }
    let (_, inv) = solve_spd(&info, &DVector::zeros(k)).map_err(|_| NonEstimable::Separation)?;
    let vcov = crate::numerics::matrix::nearest_psd(&symmetrize(inv))
        .map_err(|_| NonEstimable::Separation)?;
    Ok(ProbitFit {
        beta,
        vcov,
        converged,
        iterations,
    })
}

/// Two-step starting values. Continuous: probit selection, then least
/// squares of y on [Xᵒ, inverse Mills] over observed rows; σ and ρ from the
/// residuals and the Mills coefficient, ρ clipped to ±0.95. Binary: two
/// independent probits with ρ started at 0.
pub fn two_step_start(data: &ClusterData, family: Family) -> Result<HeckmanParams, NonEstimable> {
    let n = data.n_rows();
    let n_obs = data.n_observed();
    if n_obs == 0 || n_obs == n {
        return Err(NonEstimable::NoSelectionVariation);
    }
    let r01: Vec<f64> = data.r.iter().map(|&b| f64::from(b)).collect();
    let sel = probit(&r01, &data.x_selection).map_err(|e| match e {
        NonEstimable::DegenerateOutcome => NonEstimable::NoSelectionVariation,
        other => other,
    })?;

    let obs_idx: Vec<usize> = (0..n).filter(|&i| data.r[i]).collect();
    let p = data.x_outcome.ncols();

    match family {
        Family::Continuous => {
            let eta_s = &data.x_selection * &sel.beta;
            let mut x_aug = DMatrix::zeros(obs_idx.len(), p + 1);
            let mut y_obs = DVector::zeros(obs_idx.len());
            let mut delta_sum = 0.0;
            for (row, &i) in obs_idx.iter().enumerate() {
                for j in 0..p {
                    x_aug[(row, j)] = data.x_outcome[(i, j)];
                }
                let m = inverse_mills(eta_s[i]);
                x_aug[(row, p)] = m;
                y_obs[row] = data.y[i];
                delta_sum += (m * (m + eta_s[i])).clamp(0.0, 1.0);
            }
            let fit = least_squares(&x_aug, &y_obs).map_err(|_| NonEstimable::OptimizerFailed)?;
            let gamma = fit.beta[p];
            let n1 = obs_idx.len() as f64;
            let sigma2 = (fit.rss / n1 + gamma * gamma * (delta_sum / n1)).max(1e-8);
            let sigma = libm::sqrt(sigma2);
            let rho = (gamma / sigma).clamp(-0.95, 0.95);
            Ok(HeckmanParams {
                beta_o: fit.beta.rows(0, p).into_owned(),
                beta_s: sel.beta,
                log_sigma: Some(libm::log(sigma)),
                atanh_rho: libm::atanh(rho),
            })
        }
        Family::Binary => {
            let mut x_obs = DMatrix::zeros(obs_idx.len(), p);
            let mut y_obs = Vec::with_capacity(obs_idx.len());
            for (row, &i) in obs_idx.iter().enumerate() {
                for j in 0..p {
                    x_obs[(row, j)] = data.x_outcome[(i, j)];
                }
                y_obs.push(data.y[i]);
            }
            let out = probit(&y_obs, &x_obs)?;
            Ok(HeckmanParams {
                beta_o: out.beta,
                beta_s: sel.beta,
                log_sigma: None,
                atanh_rho: 0.0,
            })
        }
    }
}

/// Minimum observed rows for a cluster fit: twice the parameter count of the
/// continuous model.
pub fn min_observed_rows(p: usize, q: usize) -> usize {
    2 * (p + q + 2)
}

/// Fit one cluster by FIML. Clusters failing the preconditions, diverging,
/// or landing on the |ρ| = 0.99 boundary are reported [`NonEstimable`] and
/// are handled upstream like systematically missing clusters.
pub fn fit_cluster(data: &ClusterData, family: Family) -> Result<ClusterFit, NonEstimable> {
    let p = data.x_outcome.ncols();
    let q = data.x_selection.ncols();
    let n_obs = data.n_observed();
    if n_obs == 0 || n_obs == data.n_rows() {
        return Err(NonEstimable::NoSelectionVariation);
    }
    let needed = min_observed_rows(p, q);
    if n_obs < needed {
        return Err(NonEstimable::TooFewObserved {
            needed,
            got: n_obs,
        });
    }
    if family == Family::Binary {
        let observed_ones = (0..data.n_rows())
            .filter(|&i| data.r[i] && data.y[i] > 0.5)
            .count();
        if observed_ones == 0 || observed_ones == n_obs {
            return Err(NonEstimable::DegenerateOutcome);
        }
    }

    let start = two_step_start(data, family)?;
    let objective = |v: &DVector<f64>| {
        let params = HeckmanParams::from_vector(v, p, q, family);
        -match family {
            Family::Continuous => loglik_continuous(&params, data),
            Family::Binary => loglik_binary(&params, data),
        }
    };
    let res = minimize(objective, &start.to_vector(), &MinimizeOptions::default());
    if !res.x.iter().all(|v| v.is_finite()) || !res.objective.is_finite() {
        return Err(NonEstimable::OptimizerFailed);
    }
    let params = HeckmanParams::from_vector(&res.x, p, q, family);
    if params.atanh_rho.abs() >= ATANH_RHO_BOUND {
        return Err(NonEstimable::RhoAtBoundary);
    }
    if res.hessian_repaired {
        log::warn!(
            "cluster {}: indefinite Hessian repaired before inversion",
            data.cluster_id
        );
    }
    Ok(ClusterFit {
        cluster_id: data.cluster_id.clone(),
        params,
        vcov: res.vcov,
        converged: res.converged,
        n_obs,
        family,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::draws::{draw_bernoulli, draw_mvnormal, draw_normal};
    use crate::numerics::RngStream;

    /// Single-cluster dataset generated from the model itself.
    pub(crate) fn simulate_cluster(
        n: usize,
        beta_o: &[f64],
        beta_s: &[f64],
        sigma: f64,
        rho: f64,
        seed: u64,
    ) -> ClusterData {
        let mut s = RngStream::new(seed);
        let p = beta_o.len();
        let q = beta_s.len();
        let mut x_o = DMatrix::zeros(n, p);
        let mut x_s = DMatrix::zeros(n, q);
        let mut y = DVector::zeros(n);
        let mut r = Vec::with_capacity(n);
        let err_cov = SpdMatrix::new(DMatrix::from_row_slice(
            2,
            2,
            &[sigma * sigma, rho * sigma, rho * sigma, 1.0],
        ))
        .unwrap();
        for i in 0..n {
            let mut covs = vec![1.0];
            // q-1 covariates; the outcome design reuses the first p-1 of them
            for _ in 1..q {
                covs.push(draw_normal(&mut s, 0.0, 1.0).unwrap());
            }
            if q > 2 {
                // make one of them binary so designs look like the harness
                covs[1] = f64::from(draw_bernoulli(&mut s, 0.6).unwrap());
            }
            for j in 0..p {
                x_o[(i, j)] = covs[j];
            }
            for j in 0..q {
                x_s[(i, j)] = covs[j];
            }
            let eta_o: f64 = (0..p).map(|j| x_o[(i, j)] * beta_o[j]).sum();
            let eta_s: f64 = (0..q).map(|j| x_s[(i, j)] * beta_s[j]).sum();
            let e = draw_mvnormal(&mut s, &DVector::zeros(2), &err_cov).unwrap();
            let observed = eta_s + e[1] >= 0.0;
            r.push(observed);
            y[i] = if observed { eta_o + e[0] } else { f64::NAN };
        }
        ClusterData::new("sim", x_o, x_s, y, r).unwrap()
    }

    fn small_params(family: Family) -> HeckmanParams {
        HeckmanParams {
            beta_o: DVector::from_column_slice(&[0.3, 1.0, 1.0]),
            beta_s: DVector::from_column_slice(&[-0.8, 1.3, -0.7, 1.2]),
            log_sigma: match family {
                Family::Continuous => Some(0.1),
                Family::Binary => None,
            },
            atanh_rho: 0.5,
        }
    }

    #[test]
    fn continuous_loglik_factorizes_at_rho_zero() {
        let data = simulate_cluster(
            300,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.0,
            41,
        );
        let params = HeckmanParams {
            atanh_rho: 0.0,
            ..small_params(Family::Continuous)
        };
        let ll = loglik_continuous(&params, &data);
        // independent computation: gaussian density of observed y + probit of r
        let sigma = params.sigma().unwrap();
        let eta_o = &data.x_outcome * &params.beta_o;
        let eta_s = &data.x_selection * &params.beta_s;
        let mut expect = 0.0;
        for i in 0..data.n_rows() {
            if data.r[i] {
                let z = (data.y[i] - eta_o[i]) / sigma;
                expect += log_std_normal_pdf(z) - sigma.ln();
                expect += std_normal_cdf(eta_s[i]).value().ln();
            } else {
                expect += std_normal_cdf(-eta_s[i]).value().ln();
            }
        }
        assert!((ll - expect).abs() < 1e-9 * expect.abs());
    }

    #[test]
    fn continuous_single_row_contribution() {
        // one observed row with y = x'beta, sigma = 1, rho = 0
        let x_o = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let x_s = DMatrix::from_row_slice(1, 2, &[1.0, -0.4]);
        let beta_o = DVector::from_column_slice(&[0.2, 1.0]);
        let beta_s = DVector::from_column_slice(&[0.3, 0.8]);
        let y = DVector::from_column_slice(&[0.2 + 0.5]);
        let data = ClusterData::new("one", x_o, x_s, y, vec![true]).unwrap();
        let params = HeckmanParams {
            beta_o,
            beta_s,
            log_sigma: Some(0.0),
            atanh_rho: 0.0,
        };
        let ll = loglik_continuous(&params, &data);
        let eta_s = 0.3 + 0.8 * -0.4;
        let expect = std_normal_pdf(0.0).ln() + std_normal_cdf(eta_s).value().ln();
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn continuous_all_observed_rho_zero_is_gaussian_regression() {
        let mut data = simulate_cluster(
            100,
            &[0.3, 1.0, 1.0],
            &[5.0, 0.0, 0.0, 0.0],
            1.0,
            0.0,
            42,
        );
        assert!(data.r.iter().all(|&b| b), "eta_s=5 observes everything");
        // drop the selection contribution by conditioning on a huge intercept:
        // with all rows observed and rho = 0 the likelihood must equal the
        // gaussian regression likelihood plus the (constant-free) probit part,
        // which we compute and subtract exactly.
        data.r = vec![true; data.n_rows()];
        let params = HeckmanParams {
            beta_o: DVector::from_column_slice(&[0.1, 0.9, 1.2]),
            beta_s: DVector::from_column_slice(&[5.0, 0.0, 0.0, 0.0]),
            log_sigma: Some(0.2),
            atanh_rho: 0.0,
        };
        let sigma = params.sigma().unwrap();
        let eta_o = &data.x_outcome * &params.beta_o;
        let mut gauss = 0.0;
        let mut probit_part = 0.0;
        for i in 0..data.n_rows() {
            let z = (data.y[i] - eta_o[i]) / sigma;
            gauss += log_std_normal_pdf(z) - sigma.ln();
            probit_part += log_std_normal_cdf(5.0);
        }
        let ll = loglik_continuous(&params, &data);
        assert!((ll - (gauss + probit_part)).abs() < 1e-9);
    }

    #[test]
    fn binary_cells_partition_unity() {
        let params = small_params(Family::Binary);
        let x_o = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, -0.3]);
        let x_s = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, -0.3, 0.7]);
        for (bo, bs, rho) in [
            (0.0, 0.0, 0.0),
            (0.4, -0.6, 0.5),
            (-1.2, 0.9, -0.8),
            (2.0, 1.5, 0.3),
        ] {
            let mut pr = params.clone();
            pr.beta_o = DVector::from_column_slice(&[bo, 0.0, 0.0]);
            pr.beta_s = DVector::from_column_slice(&[bs, 0.0, 0.0, 0.0]);
            pr.atanh_rho = libm::atanh(rho);
            let mk = |yv: f64, rv: bool| {
                ClusterData::new(
                    "c",
                    x_o.clone(),
                    x_s.clone(),
                    DVector::from_column_slice(&[yv]),
                    vec![rv],
                )
                .unwrap()
            };
            let p_miss = loglik_binary(&pr, &mk(f64::NAN, false)).exp();
            let p_one = loglik_binary(&pr, &mk(1.0, true)).exp();
            let p_zero = loglik_binary(&pr, &mk(0.0, true)).exp();
            assert!(
                (p_miss + p_one + p_zero - 1.0).abs() < 1e-9,
                "cells sum to {} at ({bo},{bs},{rho})",
                p_miss + p_one + p_zero
            );
        }
    }

    #[test]
    fn binary_cells_at_origin() {
        // eta_o = 0, eta_s = 0, rho = 0: cells (0.5, 0.25, 0.25)
        let x_o = DMatrix::from_row_slice(1, 1, &[1.0]);
        let x_s = DMatrix::from_row_slice(1, 1, &[1.0]);
        let params = HeckmanParams {
            beta_o: DVector::zeros(1),
            beta_s: DVector::zeros(1),
            log_sigma: None,
            atanh_rho: 0.0,
        };
        let mk = |yv: f64, rv: bool| {
            ClusterData::new(
                "c",
                x_o.clone(),
                x_s.clone(),
                DVector::from_column_slice(&[yv]),
                vec![rv],
            )
            .unwrap()
        };
        assert!((loglik_binary(&params, &mk(f64::NAN, false)).exp() - 0.5).abs() < 1e-12);
        assert!((loglik_binary(&params, &mk(1.0, true)).exp() - 0.25).abs() < 1e-12);
        assert!((loglik_binary(&params, &mk(0.0, true)).exp() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn binary_loglik_factorizes_at_rho_zero() {
        let data = {
            let mut d = simulate_cluster(
                400,
                &[0.3, 1.0, 1.0],
                &[-0.2, 1.3, -0.7, 1.2],
                1.0,
                0.0,
                43,
            );
            // binarize the observed outcome
            for i in 0..d.n_rows() {
                if d.r[i] {
                    d.y[i] = f64::from(d.y[i] > 0.0);
                }
            }
            d
        };
        let params = small_params(Family::Binary);
        let params = HeckmanParams {
            atanh_rho: 0.0,
            ..params
        };
        let ll = loglik_binary(&params, &data);
        let eta_o = &data.x_outcome * &params.beta_o;
        let eta_s = &data.x_selection * &params.beta_s;
        let mut expect = 0.0;
        for i in 0..data.n_rows() {
            if data.r[i] {
                let sign = if data.y[i] > 0.5 { 1.0 } else { -1.0 };
                expect += std_normal_cdf(sign * eta_o[i]).value().ln();
                expect += std_normal_cdf(eta_s[i]).value().ln();
            } else {
                expect += std_normal_cdf(-eta_s[i]).value().ln();
            }
        }
        assert!((ll - expect).abs() < 1e-9 * expect.abs());
    }

    #[test]
    fn loglik_invariant_to_row_order() {
        let data = simulate_cluster(
            200,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.6,
            44,
        );
        let params = small_params(Family::Continuous);
        let ll = loglik_continuous(&params, &data);
        // reverse the rows
        let n = data.n_rows();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut x_o = DMatrix::zeros(n, data.x_outcome.ncols());
        let mut x_s = DMatrix::zeros(n, data.x_selection.ncols());
        let mut y = DVector::zeros(n);
        let mut r = vec![false; n];
        for (new, &old) in perm.iter().enumerate() {
            for j in 0..x_o.ncols() {
                x_o[(new, j)] = data.x_outcome[(old, j)];
            }
            for j in 0..x_s.ncols() {
                x_s[(new, j)] = data.x_selection[(old, j)];
            }
            y[new] = data.y[old];
            r[new] = data.r[old];
        }
        let rev = ClusterData::new("rev", x_o, x_s, y, r).unwrap();
        let ll_rev = loglik_continuous(&params, &rev);
        assert!((ll - ll_rev).abs() <= 1e-9 * ll.abs());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let cont = simulate_cluster(
            150,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.6,
            45,
        );
        let mut bin = simulate_cluster(
            150,
            &[0.3, 1.0, 1.0],
            &[-0.2, 1.3, -0.7, 1.2],
            1.0,
            0.6,
            46,
        );
        for i in 0..bin.n_rows() {
            if bin.r[i] {
                bin.y[i] = f64::from(bin.y[i] > 0.0);
            }
        }
        let check = |family: Family, data: &ClusterData, v: &DVector<f64>| {
            let p = data.x_outcome.ncols();
            let q = data.x_selection.ncols();
            let f = |x: &DVector<f64>| {
                let pr = HeckmanParams::from_vector(x, p, q, family);
                match family {
                    Family::Continuous => loglik_continuous(&pr, data),
                    Family::Binary => loglik_binary(&pr, data),
                }
            };
            let pr = HeckmanParams::from_vector(v, p, q, family);
            let analytic = match family {
                Family::Continuous => loglik_continuous_grad(&pr, data),
                Family::Binary => loglik_binary_grad(&pr, data),
            };
            let mut xp = v.clone();
            for i in 0..v.len() {
                let h = 1e-6 * v[i].abs().max(1.0);
                xp[i] = v[i] + h;
                let fp = f(&xp);
                xp[i] = v[i] - h;
                let fm = f(&xp);
                xp[i] = v[i];
                let fd = (fp - fm) / (2.0 * h);
                let denom = analytic[i].abs().max(1.0);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "{family:?} param {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        };
        let v_cont = small_params(Family::Continuous).to_vector();
        check(Family::Continuous, &cont, &v_cont);
        let v_bin = small_params(Family::Binary).to_vector();
        check(Family::Binary, &bin, &v_bin);
    }

    #[test]
    fn two_step_start_recovers_sign_and_rho_scale() {
        let data = simulate_cluster(
            100_000,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.0,
            47,
        );
        let start = two_step_start(&data, Family::Continuous).unwrap();
        let rho0 = start.rho().value();
        assert!(rho0.abs() < 0.05, "rho start {rho0} should be near 0");
        // ERV coefficient sign preserved
        assert!(start.beta_s[3] > 0.0);
        assert!((start.beta_s[1] - 1.3).abs() < 0.1);
    }

    #[test]
    fn degenerate_selection_is_non_estimable() {
        let mut data = simulate_cluster(50, &[0.3, 1.0, 1.0], &[0.0, 1.0, 0.0, 0.5], 1.0, 0.0, 48);
        for i in 0..data.n_rows() {
            data.r[i] = true;
            if !data.y[i].is_finite() {
                data.y[i] = 0.0;
            }
        }
        assert_eq!(
            two_step_start(&data, Family::Continuous),
            Err(NonEstimable::NoSelectionVariation)
        );
        assert!(matches!(
            fit_cluster(&data, Family::Continuous),
            Err(NonEstimable::NoSelectionVariation)
        ));
    }

    #[test]
    fn tiny_cluster_fails_minimum_data_rule() {
        let x_o = DMatrix::from_row_slice(5, 3, &[1.0; 15]);
        let x_s = DMatrix::from_row_slice(5, 4, &[1.0; 20]);
        let y = DVector::from_column_slice(&[0.1, 0.2, 0.3, f64::NAN, f64::NAN]);
        let data =
            ClusterData::new("tiny", x_o, x_s, y, vec![true, true, true, false, false]).unwrap();
        match fit_cluster(&data, Family::Continuous) {
            Err(NonEstimable::TooFewObserved { needed, got }) => {
                assert_eq!(needed, 18);
                assert_eq!(got, 3);
            }
            other => panic!("expected TooFewObserved, got {other:?}"),
        }
    }

    #[test]
    fn constrained_rho_zero_fit_matches_least_squares() {
        let data = simulate_cluster(
            2_000,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.0,
            49,
        );
        let p = data.x_outcome.ncols();
        let q = data.x_selection.ncols();
        // maximize the continuous likelihood with atanh_rho pinned to 0
        let start = two_step_start(&data, Family::Continuous).unwrap();
        let mut v0: Vec<f64> = start.to_vector().iter().copied().collect();
        v0.pop();
        let objective = |v: &DVector<f64>| {
            let mut full: Vec<f64> = v.iter().copied().collect();
            full.push(0.0);
            let pr = HeckmanParams::from_vector(
                &DVector::from_vec(full),
                p,
                q,
                Family::Continuous,
            );
            -loglik_continuous(&pr, &data)
        };
        let res = minimize(
            objective,
            &DVector::from_vec(v0),
            &MinimizeOptions::default(),
        );
        assert!(res.converged);
        // observed-rows least squares
        let obs: Vec<usize> = (0..data.n_rows()).filter(|&i| data.r[i]).collect();
        let mut x = DMatrix::zeros(obs.len(), p);
        let mut yv = DVector::zeros(obs.len());
        for (row, &i) in obs.iter().enumerate() {
            for j in 0..p {
                x[(row, j)] = data.x_outcome[(i, j)];
            }
            yv[row] = data.y[i];
        }
        let ols = least_squares(&x, &yv).unwrap();
        for j in 0..p {
            assert!(
                (res.x[j] - ols.beta[j]).abs() < 1e-4,
                "beta[{j}]: fiml {} vs ols {}",
                res.x[j],
                ols.beta[j]
            );
        }
    }

    #[test]
    fn vcov_shrinks_with_replicated_data() {
        let base = simulate_cluster(
            1_000,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.6,
            50,
        );
        let fit1 = fit_cluster(&base, Family::Continuous).unwrap();
        // stack the same rows four times: information scales by 4 exactly
        let n = base.n_rows();
        let mut x_o = DMatrix::zeros(4 * n, 3);
        let mut x_s = DMatrix::zeros(4 * n, 4);
        let mut y = DVector::zeros(4 * n);
        let mut r = vec![false; 4 * n];
        for rep in 0..4 {
            for i in 0..n {
                let t = rep * n + i;
                for j in 0..3 {
                    x_o[(t, j)] = base.x_outcome[(i, j)];
                }
                for j in 0..4 {
                    x_s[(t, j)] = base.x_selection[(i, j)];
                }
                y[t] = base.y[i];
                r[t] = base.r[i];
            }
        }
        let big = ClusterData::new("x4", x_o, x_s, y, r).unwrap();
        let fit4 = fit_cluster(&big, Family::Continuous).unwrap();
        for j in 0..fit1.vcov.dim() {
            let ratio = fit4.vcov.as_matrix()[(j, j)] / fit1.vcov.as_matrix()[(j, j)];
            assert!(
                (0.15..=0.4).contains(&ratio),
                "diag {j} ratio {ratio} outside [0.15, 0.4]"
            );
        }
    }

    #[test]
    fn self_generation_consistency_smoke() {
        // small-n version of the acceptance criterion: estimates land near
        // truth and vcov is PSD
        let data = simulate_cluster(
            8_000,
            &[0.3, 1.0, 1.0],
            &[-0.8, 1.3, -0.7, 1.2],
            1.0,
            0.6,
            51,
        );
        let fit = fit_cluster(&data, Family::Continuous).unwrap();
        assert!(fit.converged);
        assert!((fit.params.beta_o[1] - 1.0).abs() < 0.1);
        assert!((fit.params.rho().value() - 0.6).abs() < 0.15);
        assert!((fit.params.sigma().unwrap() - 1.0).abs() < 0.1);
    }
}
