//! Random-effects meta-analysis pooling of cluster fits.
//!
//! Cluster estimates y_i with within-cluster covariances S_i follow
//! y_i ~ N(θ, ψ + S_i). ψ is estimated by restricted maximum likelihood with
//! the between-cluster covariance parameterized through a lower-triangular
//! Cholesky factor (log-diagonal), which keeps it PSD without constraints.
//! θ is the GLS mean at ψ̂ and its covariance is (Σ (ψ̂+S_i)⁻¹)⁻¹. The
//! covariance of ψ̂ itself is mapped from the inverse REML Hessian to the
//! half-vectorized element scale, which is all the imputation draw needs.

use crate::error::Error;
use crate::heckman::{ClusterFit, Family};
use crate::numerics::matrix::{nearest_psd, SpdMatrix};
use crate::numerics::optimize::{minimize, MinimizeOptions};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Jitter added inside every (ψ + S_i) inversion.
const META_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiStructure {
    Full,
    Diagonal,
}

#[derive(Debug, Clone)]
pub struct MetaInput {
    pub estimates: Vec<DVector<f64>>,
    pub vcovs: Vec<SpdMatrix>,
}

impl MetaInput {
    pub fn new(estimates: Vec<DVector<f64>>, vcovs: Vec<SpdMatrix>) -> Result<Self, Error> {
        if estimates.len() != vcovs.len() {
            return Err(Error::Pooling("estimates/vcovs length mismatch".into()));
        }
        if estimates.len() < 2 {
            return Err(Error::Pooling(format!(
                "meta-analysis needs >= 2 clusters, got {}",
                estimates.len()
            )));
        }
        let d = estimates[0].len();
        if d == 0 {
            return Err(Error::Pooling("zero-dimensional estimates".into()));
        }
        for (e, v) in estimates.iter().zip(&vcovs) {
            if e.len() != d || v.dim() != d {
                return Err(Error::Pooling(
                    "inconsistent dimensions across clusters".into(),
                ));
            }
            if e.iter().any(|x| !x.is_finite()) {
                return Err(Error::Pooling("non-finite cluster estimate".into()));
            }
        }
        // canonical cluster order: the model is exchangeable, and a fixed
        // summation order makes every output exactly permutation-invariant
        let mut order: Vec<usize> = (0..estimates.len()).collect();
        order.sort_by(|&a, &b| {
            let key = |i: usize| {
                estimates[i]
                    .iter()
                    .copied()
                    .chain(vcovs[i].as_matrix().iter().copied())
            };
            key(a)
                .zip(key(b))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let estimates = order.iter().map(|&i| estimates[i].clone()).collect();
        let vcovs = order.iter().map(|&i| vcovs[i].clone()).collect();
        Ok(Self { estimates, vcovs })
    }

    fn dim(&self) -> usize {
        self.estimates[0].len()
    }

    fn len(&self) -> usize {
        self.estimates.len()
    }
}

#[derive(Debug, Clone)]
pub struct MetaFit {
    pub theta_hat: DVector<f64>,
    pub psi_hat: SpdMatrix,
    /// Sampling covariance of theta_hat.
    pub s_theta: SpdMatrix,
    /// Sampling covariance of vech(psi_hat): lower-triangle elements row by
    /// row, i.e. (0,0), (1,0), (1,1), (2,0), ...
    pub s_psi: SpdMatrix,
    pub converged: bool,
    pub used_moments_fallback: bool,
}

/// Index pairs of vech in storage order.
pub fn vech_indices(d: usize) -> Vec<(usize, usize)> {
    let mut idx = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            idx.push((i, j));
        }
    }
    idx
}

pub fn vech(m: &DMatrix<f64>) -> DVector<f64> {
    let pairs = vech_indices(m.nrows());
    DVector::from_iterator(pairs.len(), pairs.iter().map(|&(i, j)| m[(i, j)]))
}

fn n_params(d: usize, structure: PsiStructure) -> usize {
    match structure {
        PsiStructure::Full => d * (d + 1) / 2,
        PsiStructure::Diagonal => d,
    }
}

/// Build ψ = L Lᵀ from the unconstrained parameter vector.
fn psi_from_params(phi: &DVector<f64>, d: usize, structure: PsiStructure) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    match structure {
        PsiStructure::Full => {
            let mut k = 0;
            for i in 0..d {
                for j in 0..=i {
                    if i == j {
                        l[(i, j)] = libm::exp(phi[k].clamp(-30.0, 15.0));
                    } else {
                        l[(i, j)] = phi[k];
                    }
                    k += 1;
                }
            }
        }
        PsiStructure::Diagonal => {
            for i in 0..d {
                l[(i, i)] = libm::exp(phi[i].clamp(-30.0, 15.0));
            }
        }
    }
    &l * l.transpose()
}

fn params_from_psi(psi: &DMatrix<f64>, structure: PsiStructure) -> DVector<f64> {
    let d = psi.nrows();
    // jittered Cholesky; callers pass a PSD-projected start
    let mut m = psi.clone();
    for i in 0..d {
        m[(i, i)] += 1e-8 * (1.0 + m[(i, i)].abs());
    }
    let l = Cholesky::new(m)
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::identity(d, d) * 1e-3);
    match structure {
        PsiStructure::Full => {
            let mut phi = Vec::with_capacity(n_params(d, structure));
            for i in 0..d {
                for j in 0..=i {
                    if i == j {
                        phi.push(libm::log(l[(i, i)].max(1e-12)));
                    } else {
                        phi.push(l[(i, j)]);
                    }
                }
            }
            DVector::from_vec(phi)
        }
        PsiStructure::Diagonal => {
            DVector::from_iterator(d, (0..d).map(|i| libm::log(l[(i, i)].max(1e-12))))
        }
    }
}

struct GlsSummary {
    theta: DVector<f64>,
    sum_w: DMatrix<f64>,
    logdet_sum: f64,
    quad: f64,
}

/// GLS mean and the REML building blocks at a fixed ψ. None when any
/// (ψ + S_i) fails to factor.
fn gls_at_psi(input: &MetaInput, psi: &DMatrix<f64>) -> Option<GlsSummary> {
    let d = input.dim();
    let mut sum_w = DMatrix::zeros(d, d);
    let mut sum_wy = DVector::zeros(d);
    let mut logdet_sum = 0.0;
    let mut factors: Vec<Cholesky<f64, nalgebra::Dyn>> = Vec::with_capacity(input.len());
    for (y, s) in input.estimates.iter().zip(&input.vcovs) {
        let mut m = psi + s.as_matrix();
        for i in 0..d {
            m[(i, i)] += META_JITTER;
        }
        let chol = Cholesky::new(m)?;
        let l = chol.l();
        for i in 0..d {
            logdet_sum += 2.0 * libm::log(l[(i, i)]);
        }
        let w = chol.inverse();
        sum_w += &w;
        sum_wy += &w * y;
        factors.push(chol);
    }
    let sum_chol = Cholesky::new(sum_w.clone())?;
    let theta = sum_chol.solve(&sum_wy);
    let mut quad = 0.0;
    for (y, chol) in input.estimates.iter().zip(&factors) {
        let r = y - &theta;
        let solved = chol.solve(&r);
        quad += r.dot(&solved);
    }
    Some(GlsSummary {
        theta,
        sum_w,
        logdet_sum,
        quad,
    })
}

/// Negative restricted log-likelihood up to a constant.
fn reml_nll(input: &MetaInput, psi: &DMatrix<f64>) -> f64 {
    match gls_at_psi(input, psi) {
        Some(g) => match Cholesky::new(g.sum_w.clone()) {
            Some(c) => {
                let l = c.l();
                let det_sum: f64 = (0..l.nrows()).map(|i| 2.0 * libm::log(l[(i, i)])).sum();
                0.5 * (g.logdet_sum + det_sum + g.quad)
            }
            None => f64::INFINITY,
        },
        None => f64::INFINITY,
    }
}

/// Method-of-moments ψ: sample covariance of the estimates minus the average
/// within-cluster covariance, PSD-projected.
fn moments_psi(input: &MetaInput) -> DMatrix<f64> {
    let d = input.dim();
    let n = input.len() as f64;
    let mean = input
        .estimates
        .iter()
        .fold(DVector::zeros(d), |acc, y| acc + y)
        / n;
    let mut cov = DMatrix::zeros(d, d);
    for y in &input.estimates {
        let r = y - &mean;
        cov += &r * r.transpose();
    }
    cov /= n - 1.0;
    let mut s_bar = DMatrix::zeros(d, d);
    for s in &input.vcovs {
        s_bar += s.as_matrix();
    }
    s_bar /= n;
    nearest_psd(&(cov - s_bar))
        .map(SpdMatrix::into_matrix)
        .unwrap_or_else(|_| DMatrix::zeros(d, d))
}

/// Normal-theory element variances used when the REML Hessian is unusable:
/// Var(ψ_ij) ≈ (t_ii t_jj + t_ij²)/N with t = ψ + S̄.
fn moments_s_psi(input: &MetaInput, psi: &DMatrix<f64>) -> SpdMatrix {
    let d = input.dim();
    let n = input.len() as f64;
    let mut total = psi.clone();
    for s in &input.vcovs {
        total += s.as_matrix() / n;
    }
    let pairs = vech_indices(d);
    let diag: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| (total[(i, i)] * total[(j, j)] + total[(i, j)].powi(2)) / n)
        .collect();
    SpdMatrix::from_diagonal(&diag).unwrap_or_else(|_| SpdMatrix::zeros(pairs.len()))
}

fn finish_fit(
    input: &MetaInput,
    psi: DMatrix<f64>,
    s_psi: SpdMatrix,
    converged: bool,
    used_moments_fallback: bool,
) -> Result<MetaFit, Error> {
    let g = gls_at_psi(input, &psi)
        .ok_or_else(|| Error::Pooling("between+within covariance not invertible".into()))?;
    let d = input.dim();
    let s_theta_raw = Cholesky::new(g.sum_w.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Pooling("weight sum not invertible".into()))?;
    let sym = 0.5 * (&s_theta_raw + s_theta_raw.transpose());
    let s_theta = nearest_psd(&sym).unwrap_or_else(|_| SpdMatrix::zeros(d));
    // zero heterogeneity must survive as exactly zero, so validate rather
    // than project (projection would impose its strictly positive floor)
    let psi_hat = SpdMatrix::new(psi.clone())
        .or_else(|_| nearest_psd(&psi))
        .unwrap_or_else(|_| SpdMatrix::zeros(d));
    Ok(MetaFit {
        theta_hat: g.theta,
        psi_hat,
        s_theta,
        s_psi,
        converged,
        used_moments_fallback,
    })
}

/// Multivariate random-effects REML.
pub fn reml_multivariate(input: &MetaInput, structure: PsiStructure) -> Result<MetaFit, Error> {
    let d = input.dim();
    let psi0 = moments_psi(input);
    let phi0 = params_from_psi(&psi0, structure);
    let objective = |phi: &DVector<f64>| reml_nll(input, &psi_from_params(phi, d, structure));

    let res = minimize(objective, &phi0, &MinimizeOptions::default());
    let ok = res.x.iter().all(|v| v.is_finite()) && res.objective.is_finite();
    if !ok {
        let psi = moments_psi(input);
        let s_psi = moments_s_psi(input, &psi);
        log::warn!("multivariate REML failed; falling back to method of moments");
        return finish_fit(input, psi, s_psi, false, true);
    }

    let psi = psi_from_params(&res.x, d, structure);
    // map Var(phi) to the vech element scale via the finite-difference Jacobian
    let pairs = vech_indices(d);
    let npar = res.x.len();
    let mut jac = DMatrix::zeros(pairs.len(), npar);
    let mut xp = res.x.clone();
    for k in 0..npar {
        let h = 1e-6 * res.x[k].abs().max(1.0);
        xp[k] = res.x[k] + h;
        let vp = vech(&psi_from_params(&xp, d, structure));
        xp[k] = res.x[k] - h;
        let vm = vech(&psi_from_params(&xp, d, structure));
        xp[k] = res.x[k];
        for e in 0..pairs.len() {
            jac[(e, k)] = (vp[e] - vm[e]) / (2.0 * h);
        }
    }
    let mapped = &jac * res.vcov.as_matrix() * jac.transpose();
    let mut mapped = 0.5 * (&mapped + mapped.transpose());
    // weakly identified Cholesky parameters leave near-null Hessian
    // directions whose floored inverse is astronomically large; element
    // variances beyond 25x their normal-theory scale are clamped by
    // congruence so downstream psi* draws stay finite-scaled
    let reference = moments_s_psi(input, &psi);
    let mut scale = vec![1.0; pairs.len()];
    for e in 0..pairs.len() {
        let cap = 25.0 * reference.as_matrix()[(e, e)].max(1e-12);
        if mapped[(e, e)] > cap {
            scale[e] = (cap / mapped[(e, e)]).sqrt();
        }
    }
    for i in 0..pairs.len() {
        for j in 0..pairs.len() {
            mapped[(i, j)] *= scale[i] * scale[j];
        }
    }
    let s_psi = nearest_psd(&mapped).unwrap_or_else(|_| moments_s_psi(input, &psi));
    finish_fit(input, psi, s_psi, res.converged, false)
}

/// Univariate random-effects REML with ψ profiled directly on [0, ∞);
/// the boundary estimate ψ̂ = 0 is exact.
pub fn reml_univariate(input: &MetaInput) -> Result<MetaFit, Error> {
    if input.dim() != 1 {
        return Err(Error::Pooling(format!(
            "univariate REML got dimension {}",
            input.dim()
        )));
    }
    let nll = |psi: f64| reml_nll(input, &DMatrix::from_element(1, 1, psi));
    let n = input.len() as f64;
    let mean: f64 = input.estimates.iter().map(|y| y[0]).sum::<f64>() / n;
    let var: f64 = input
        .estimates
        .iter()
        .map(|y| (y[0] - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let max_s = input
        .vcovs
        .iter()
        .map(|s| s.as_matrix()[(0, 0)])
        .fold(0.0f64, f64::max);
    let hi = 10.0 * (var + max_s) + 1.0;

    // golden-section search over [0, hi]
    let gr = (libm::sqrt(5.0) - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, hi);
    let mut c = b - gr * (b - a);
    let mut d = a + gr * (b - a);
    let (mut fc, mut fd) = (nll(c), nll(d));
    for _ in 0..120 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - gr * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + gr * (b - a);
            fd = nll(d);
        }
        if (b - a).abs() < 1e-13 * hi {
            break;
        }
    }
    let mut psi = 0.5 * (a + b);
    // Newton polish on the interior, then compare against the boundary
    for _ in 0..3 {
        let h = 1e-7 * (1.0 + psi);
        if psi <= h {
            break;
        }
        let (fm, f0, fp) = (nll(psi - h), nll(psi), nll(psi + h));
        let g = (fp - fm) / (2.0 * h);
        let curv = (fp - 2.0 * f0 + fm) / (h * h);
        if !g.is_finite() || !curv.is_finite() || curv <= 0.0 {
            break;
        }
        let next = (psi - g / curv).max(0.0);
        if nll(next) <= f0 {
            psi = next;
        } else {
            break;
        }
    }
    if nll(0.0) <= nll(psi) {
        psi = 0.0;
    }

    // curvature-based variance of psi-hat (one-sided at the boundary)
    let h = 1e-6 * (1.0 + psi);
    let curv = if psi > h {
        (nll(psi + h) - 2.0 * nll(psi) + nll(psi - h)) / (h * h)
    } else {
        (nll(2.0 * h) - 2.0 * nll(h) + nll(0.0)) / (h * h)
    };
    let reference = moments_s_psi(input, &DMatrix::from_element(1, 1, psi)).as_matrix()[(0, 0)];
    let var_psi = if curv.is_finite() && curv > 1e-12 {
        // a flat objective makes 1/curvature explode; clamp to 25x the
        // normal-theory variance scale
        (1.0 / curv).min(25.0 * reference.max(1e-12))
    } else {
        reference
    };
    let s_psi = SpdMatrix::from_diagonal(&[var_psi.max(0.0)])?;
    finish_fit(input, DMatrix::from_element(1, 1, psi), s_psi, true, false)
}

/// Pooled marginal model for the selection pipeline: multivariate REML per
/// coefficient block, univariate REML for log σ and atanh ρ; the σ block is
/// absent for the binary family. Non-converged cluster fits are excluded.
#[derive(Debug, Clone)]
pub struct MarginalModel {
    pub family: Family,
    pub p: usize,
    pub q: usize,
    pub block_o: MetaFit,
    pub block_s: Option<MetaFit>,
    pub meta_log_sigma: Option<MetaFit>,
    pub meta_atanh_rho: Option<MetaFit>,
    pub contributing_clusters: Vec<String>,
}

fn block_input(fits: &[&ClusterFit], range: std::ops::Range<usize>) -> Result<MetaInput, Error> {
    let estimates = fits
        .iter()
        .map(|f| {
            let v = f.params.to_vector();
            DVector::from_iterator(range.len(), range.clone().map(|i| v[i]))
        })
        .collect();
    let vcovs = fits
        .iter()
        .map(|f| f.vcov.principal_submatrix(range.clone()))
        .collect();
    MetaInput::new(estimates, vcovs)
}

pub fn pool_heckman(fits: &[ClusterFit], structure: PsiStructure) -> Result<MarginalModel, Error> {
    let usable: Vec<&ClusterFit> = fits.iter().filter(|f| f.converged).collect();
    if usable.len() < 2 {
        return Err(Error::Pooling(format!(
            "need >= 2 converged cluster fits, got {}",
            usable.len()
        )));
    }
    let family = usable[0].family;
    let p = usable[0].params.beta_o.len();
    let q = usable[0].params.beta_s.len();
    if usable
        .iter()
        .any(|f| f.family != family || f.params.beta_o.len() != p || f.params.beta_s.len() != q)
    {
        return Err(Error::Pooling("cluster fits are not homogeneous".into()));
    }

    let block_o = reml_multivariate(&block_input(&usable, 0..p)?, structure)?;
    let block_s = reml_multivariate(&block_input(&usable, p..p + q)?, structure)?;
    let meta_log_sigma = match family {
        Family::Continuous => Some(reml_univariate(&block_input(&usable, p + q..p + q + 1)?)?),
        Family::Binary => None,
    };
    let rho_idx = match family {
        Family::Continuous => p + q + 1,
        Family::Binary => p + q,
    };
    let meta_atanh_rho = Some(reml_univariate(&block_input(&usable, rho_idx..rho_idx + 1)?)?);

    Ok(MarginalModel {
        family,
        p,
        q,
        block_o,
        block_s: Some(block_s),
        meta_log_sigma,
        meta_atanh_rho,
        contributing_clusters: usable.iter().map(|f| f.cluster_id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::draws::draw_mvnormal;
    use crate::numerics::RngStream;

    fn scalar_input(ys: &[f64], vars: &[f64]) -> MetaInput {
        MetaInput::new(
            ys.iter().map(|&y| DVector::from_column_slice(&[y])).collect(),
            vars.iter()
                .map(|&v| SpdMatrix::from_diagonal(&[v]).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_single_cluster() {
        assert!(MetaInput::new(
            vec![DVector::from_column_slice(&[1.0])],
            vec![SpdMatrix::from_diagonal(&[1.0]).unwrap()],
        )
        .is_err());
    }

    #[test]
    fn balanced_case_matches_closed_form() {
        let ys = [0.2, -0.1, 0.5, 0.9, -0.4, 0.3];
        let s = 0.07;
        let input = scalar_input(&ys, &[s; 6]);
        let fit = reml_univariate(&input).unwrap();
        let mean = ys.iter().sum::<f64>() / 6.0;
        assert!((fit.theta_hat[0] - mean).abs() < 1e-8, "balanced GLS = mean");
        let sample_var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 5.0;
        let expected_psi = (sample_var - s).max(0.0);
        assert!(
            (fit.psi_hat.as_matrix()[(0, 0)] - expected_psi).abs() < 1e-6,
            "psi {} vs closed form {}",
            fit.psi_hat.as_matrix()[(0, 0)],
            expected_psi
        );
    }

    #[test]
    fn identical_inputs_give_zero_heterogeneity() {
        let input = scalar_input(&[0.7; 5], &[0.2; 5]);
        let fit = reml_univariate(&input).unwrap();
        assert_eq!(fit.psi_hat.as_matrix()[(0, 0)], 0.0);
        assert!((fit.theta_hat[0] - 0.7).abs() < 1e-10);
    }

    #[test]
    fn two_cluster_case_matches_grid_search() {
        let input = scalar_input(&[0.0, 1.0], &[0.1, 0.1]);
        let fit = reml_univariate(&input).unwrap();
        // dense grid oracle over psi
        let nll = |psi: f64| reml_nll(&input, &DMatrix::from_element(1, 1, psi));
        let mut best = (0.0, nll(0.0));
        let mut psi = 0.0;
        while psi <= 5.0 {
            let f = nll(psi);
            if f < best.1 {
                best = (psi, f);
            }
            psi += 1e-5;
        }
        assert!(
            (fit.psi_hat.as_matrix()[(0, 0)] - best.0).abs() < 1e-4,
            "psi {} vs grid {}",
            fit.psi_hat.as_matrix()[(0, 0)],
            best.0
        );
        assert!(nll(fit.psi_hat.as_matrix()[(0, 0)]) <= best.1 + 1e-6);
    }

    #[test]
    fn fixed_effect_limit() {
        let ys = [0.3, 0.5, 0.1, 0.9];
        let input = scalar_input(&ys, &[1e-12; 4]);
        let fit = reml_univariate(&input).unwrap();
        let mean = ys.iter().sum::<f64>() / 4.0;
        assert!((fit.theta_hat[0] - mean).abs() < 1e-8);
        let psi = fit.psi_hat.as_matrix()[(0, 0)];
        assert!((fit.s_theta.as_matrix()[(0, 0)] - psi / 4.0).abs() < 1e-6 * psi.max(1e-9));
    }

    #[test]
    fn pooled_mean_in_convex_hull() {
        let ys = [-1.0, 0.2, 2.5, 0.7];
        let input = scalar_input(&ys, &[0.3, 0.05, 0.8, 0.2]);
        let fit = reml_univariate(&input).unwrap();
        let t = fit.theta_hat[0];
        assert!(t > -1.0 && t < 2.5);
    }

    #[test]
    fn multivariate_recovers_self_generated_heterogeneity() {
        let truth_theta = DVector::from_column_slice(&[0.5, -0.3]);
        let truth_psi =
            SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.2])).unwrap();
        let mut rng = RngStream::new(314);
        let n = 200;
        let mut estimates = Vec::new();
        let mut vcovs = Vec::new();
        for i in 0..n {
            let s_var = 0.05 + 0.1 * (i as f64 / n as f64);
            let s = SpdMatrix::from_diagonal(&[s_var, s_var * 0.6]).unwrap();
            let b = draw_mvnormal(&mut rng, &truth_theta, &truth_psi).unwrap();
            let y = draw_mvnormal(&mut rng, &b, &s).unwrap();
            estimates.push(y);
            vcovs.push(s);
        }
        let input = MetaInput::new(estimates, vcovs).unwrap();
        let fit = reml_multivariate(&input, PsiStructure::Full).unwrap();
        for (k, truth) in [(0, 0.4), (1, 0.2)] {
            let got = fit.psi_hat.as_matrix()[(k, k)];
            assert!(
                (got - truth).abs() / truth < 0.15,
                "psi[{k}{k}] {got} vs {truth}"
            );
        }
        for k in 0..2 {
            assert!((fit.theta_hat[k] - truth_theta[k]).abs() < 3.0 * (0.45f64 / 200.0).sqrt());
        }
        // s_psi has one row per distinct element and is PSD
        assert_eq!(fit.s_psi.dim(), 3);
    }

    #[test]
    fn permutation_of_clusters_changes_nothing() {
        let ys = [0.12, -0.55, 0.31, 0.9, -0.2, 0.05, 0.47];
        let vars = [0.2, 0.15, 0.3, 0.08, 0.22, 0.19, 0.11];
        let forward = reml_univariate(&scalar_input(&ys, &vars)).unwrap();
        let mut ys_r = ys;
        ys_r.reverse();
        let mut vars_r = vars;
        vars_r.reverse();
        let backward = reml_univariate(&scalar_input(&ys_r, &vars_r)).unwrap();
        assert!((forward.theta_hat[0] - backward.theta_hat[0]).abs() < 1e-10);
        assert!(
            (forward.psi_hat.as_matrix()[(0, 0)] - backward.psi_hat.as_matrix()[(0, 0)]).abs()
                < 1e-10
        );

        // multivariate, 2-d
        let mut rng = RngStream::new(11);
        let mut est = Vec::new();
        let mut vc = Vec::new();
        for _ in 0..8 {
            est.push(DVector::from_column_slice(&[
                crate::numerics::draws::draw_normal(&mut rng, 0.0, 1.0).unwrap(),
                crate::numerics::draws::draw_normal(&mut rng, 0.5, 0.7).unwrap(),
            ]));
            vc.push(SpdMatrix::from_diagonal(&[0.1, 0.2]).unwrap());
        }
        let fwd =
            reml_multivariate(&MetaInput::new(est.clone(), vc.clone()).unwrap(), PsiStructure::Full)
                .unwrap();
        est.reverse();
        vc.reverse();
        let bwd = reml_multivariate(&MetaInput::new(est, vc).unwrap(), PsiStructure::Full).unwrap();
        assert!((&fwd.theta_hat - &bwd.theta_hat).amax() < 1e-10);
        assert!((fwd.psi_hat.as_matrix() - bwd.psi_hat.as_matrix()).amax() < 1e-10);
    }

    #[test]
    fn diagonal_structure_zeroes_off_diagonals() {
        let mut rng = RngStream::new(21);
        let mut est = Vec::new();
        let mut vc = Vec::new();
        for _ in 0..30 {
            est.push(DVector::from_column_slice(&[
                crate::numerics::draws::draw_normal(&mut rng, 0.0, 1.0).unwrap(),
                crate::numerics::draws::draw_normal(&mut rng, 0.0, 1.0).unwrap(),
            ]));
            vc.push(SpdMatrix::from_diagonal(&[0.05, 0.05]).unwrap());
        }
        let fit =
            reml_multivariate(&MetaInput::new(est, vc).unwrap(), PsiStructure::Diagonal).unwrap();
        assert_eq!(fit.psi_hat.as_matrix()[(0, 1)], 0.0);
        assert_eq!(fit.psi_hat.as_matrix()[(1, 0)], 0.0);
    }

    fn synthetic_fit(id: &str, shift: f64, converged: bool) -> ClusterFit {
        use crate::heckman::HeckmanParams;
        let p = 2;
        let q = 3;
        let dim = p + q + 2;
        let mut vcov = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                vcov[(i, j)] = if i == j {
                    0.1 + 0.01 * i as f64
                } else {
                    0.001 * ((i + j) as f64)
                };
            }
        }
        ClusterFit {
            cluster_id: id.to_string(),
            params: HeckmanParams {
                beta_o: DVector::from_column_slice(&[0.3 + shift, 1.0 - shift]),
                beta_s: DVector::from_column_slice(&[-0.8, 1.3 + shift, -0.7]),
                log_sigma: Some(0.05 * shift),
                atanh_rho: 0.55 + 0.2 * shift,
            },
            vcov: nearest_psd(&vcov).unwrap(),
            converged,
            n_obs: 500,
            family: Family::Continuous,
        }
    }

    #[test]
    fn pool_extracts_blocks_and_filters_non_converged() {
        let mut fits: Vec<ClusterFit> = (0..10)
            .map(|i| synthetic_fit(&format!("c{i}"), (i as f64 - 4.5) / 10.0, true))
            .collect();
        fits[3].converged = false;
        let model = pool_heckman(&fits, PsiStructure::Full).unwrap();
        assert_eq!(model.contributing_clusters.len(), 9);
        assert!(!model.contributing_clusters.contains(&"c3".to_string()));
        assert_eq!(model.block_o.theta_hat.len(), 2);
        assert_eq!(model.block_s.as_ref().unwrap().theta_hat.len(), 3);
        assert!(model.meta_log_sigma.is_some());
        assert!(model.meta_atanh_rho.is_some());
        // block extraction uses exactly the principal submatrix of each vcov
        let sub = fits[0].vcov.principal_submatrix(0..2);
        assert_eq!(sub.as_matrix()[(0, 1)], fits[0].vcov.as_matrix()[(0, 1)]);
    }

    #[test]
    fn pool_requires_two_converged() {
        let fits = vec![
            synthetic_fit("a", 0.0, true),
            synthetic_fit("b", 0.1, false),
        ];
        assert!(matches!(
            pool_heckman(&fits, PsiStructure::Full),
            Err(Error::Pooling(_))
        ));
    }

    #[test]
    fn binary_pool_has_no_sigma_block() {
        use crate::heckman::HeckmanParams;
        let mk = |id: &str, shift: f64| {
            let dim = 2 + 3 + 1;
            ClusterFit {
                cluster_id: id.to_string(),
                params: HeckmanParams {
                    beta_o: DVector::from_column_slice(&[0.3 + shift, 1.0]),
                    beta_s: DVector::from_column_slice(&[-0.8, 1.3, -0.7]),
                    log_sigma: None,
                    atanh_rho: 0.5 + shift,
                },
                vcov: SpdMatrix::identity(dim),
                converged: true,
                n_obs: 100,
                family: Family::Binary,
            }
        };
        let model = pool_heckman(&[mk("a", 0.0), mk("b", 0.2), mk("c", -0.2)], PsiStructure::Full)
            .unwrap();
        assert!(model.meta_log_sigma.is_none());
        assert!(model.meta_atanh_rho.is_some());
    }
}

