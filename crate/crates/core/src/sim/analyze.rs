//! Two-stage analysis of a (completed) dataset and Rubin pooling across
//! imputations.
//!
//! The analysis model regresses y on [1, X1, X2] per cluster (least squares
//! for continuous outcomes, probit for binary) and pools the three
//! coefficients with a multivariate random-effects meta-analysis; the
//! random-effect standard deviations come from the diagonal of ψ̂. Rows with
//! a missing outcome are skipped, so running this directly on incomplete
//! data is the complete-case analysis.

use crate::data::TabularDataset;
use crate::error::Error;
use crate::heckman::{least_squares, probit, Family};
use crate::meta::{reml_multivariate, MetaInput, PsiStructure};

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone)]
pub struct AnalysisFit {
    pub estimates: [f64; 3],
    pub ses: [f64; 3],
    pub re_sd: [f64; 3],
    pub n_clusters_used: usize,
    pub converged: bool,
}

impl AnalysisFit {
    /// Wald 95% intervals for the coefficients.
    pub fn wald_ci(&self) -> [(f64, f64); 3] {
        let mut ci = [(0.0, 0.0); 3];
        for j in 0..3 {
            ci[j] = (
                self.estimates[j] - Z_975 * self.ses[j],
                self.estimates[j] + Z_975 * self.ses[j],
            );
        }
        ci
    }
}

/// Per-cluster regression + REML pooling over the coefficient vector.
pub fn analyze_two_stage(
    data: &TabularDataset,
    family: Family,
    structure: PsiStructure,
) -> Result<AnalysisFit, Error> {
    let y_idx = data.column_index("y")?;
    let x1 = data.column_index("X1")?;
    let x2 = data.column_index("X2")?;
    let mut estimates = Vec::new();
    let mut vcovs = Vec::new();
    let mut all_converged = true;
    for (id, rows) in data.cluster_groups() {
        let usable: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&r| data.numeric_at(y_idx, r).is_some())
            .collect();
        if usable.len() < 8 {
            if !usable.is_empty() {
                log::warn!("analysis: cluster {id} has only {} usable rows; dropped", usable.len());
            }
            continue;
        }
        let mut x = DMatrix::zeros(usable.len(), 3);
        let mut y = DVector::zeros(usable.len());
        for (i, &r) in usable.iter().enumerate() {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = data
                .numeric_at(x1, r)
                .ok_or_else(|| Error::Data("X1 missing".into()))?;
            x[(i, 2)] = data
                .numeric_at(x2, r)
                .ok_or_else(|| Error::Data("X2 missing".into()))?;
            y[i] = data.numeric_at(y_idx, r).unwrap();
        }
        match family {
            Family::Continuous => match least_squares(&x, &y) {
                Ok(fit) => {
                    estimates.push(fit.beta);
                    vcovs.push(fit.vcov);
                }
                Err(e) => {
                    log::warn!("analysis: cluster {id} regression failed ({e}); dropped");
                }
            },
            Family::Binary => {
                let yv: Vec<f64> = y.iter().copied().collect();
                match probit(&yv, &x) {
                    Ok(fit) => {
                        if !fit.converged {
                            all_converged = false;
                        }
                        estimates.push(fit.beta);
                        vcovs.push(fit.vcov);
                    }
                    Err(e) => {
                        log::warn!("analysis: cluster {id} probit failed ({e}); dropped");
                    }
                }
            }
        }
    }
    let n_used = estimates.len();
    let input = MetaInput::new(estimates, vcovs)?;
    let fit = reml_multivariate(&input, structure)?;
    let mut est = [0.0; 3];
    let mut ses = [0.0; 3];
    let mut re = [0.0; 3];
    for j in 0..3 {
        est[j] = fit.theta_hat[j];
        ses[j] = fit.s_theta.as_matrix()[(j, j)].max(0.0).sqrt();
        re[j] = fit.psi_hat.as_matrix()[(j, j)].max(0.0).sqrt();
    }
    Ok(AnalysisFit {
        estimates: est,
        ses,
        re_sd: re,
        n_clusters_used: n_used,
        converged: fit.converged && all_converged,
    })
}

/// Rubin combination of one scalar estimand across imputations.
#[derive(Debug, Clone, Copy)]
pub struct RubinScalar {
    pub q_bar: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
    pub df: f64,
    pub ci: (f64, f64),
}

/// Q̄ = mean, W = mean(SE²), B = sample variance of estimates,
/// T = W + (1+1/m)B, df = (m-1)(1 + W/((1+1/m)B))², CI = Q̄ ± t·√T (Wald).
pub fn rubin_combine(estimates: &[f64], ses: &[f64]) -> Result<RubinScalar, Error> {
    let m = estimates.len();
    if m < 2 || ses.len() != m {
        return Err(Error::Pooling(format!(
            "Rubin pooling needs m >= 2 matched estimates, got {m}"
        )));
    }
    let mf = m as f64;
    let q_bar = estimates.iter().sum::<f64>() / mf;
    let within = ses.iter().map(|s| s * s).sum::<f64>() / mf;
    let between = estimates
        .iter()
        .map(|e| (e - q_bar) * (e - q_bar))
        .sum::<f64>()
        / (mf - 1.0);
    let scaled_b = (1.0 + 1.0 / mf) * between;
    let total = within + scaled_b;
    // B ~ 0 (identical imputations up to roundoff) degenerates to the normal
    // reference; very large df likewise, and it also defuses the t-quantile
    // root-finder which stalls at astronomical df
    let (df, t) = if scaled_b > 1e-12 * total.max(f64::MIN_POSITIVE) {
        let df = (mf - 1.0) * (1.0 + within / scaled_b).powi(2);
        let q = if df > 1e6 {
            Z_975
        } else {
            StudentsT::new(0.0, 1.0, df)
                .map(|d| d.inverse_cdf(0.975))
                .unwrap_or(Z_975)
        };
        (df, q)
    } else {
        (f64::INFINITY, Z_975)
    };
    let half = t * total.sqrt();
    Ok(RubinScalar {
        q_bar,
        within,
        between,
        total,
        df,
        ci: (q_bar - half, q_bar + half),
    })
}

#[derive(Debug, Clone)]
pub struct PooledResult {
    pub estimates: [f64; 3],
    pub ses: [f64; 3],
    pub ci: [(f64, f64); 3],
    /// Random-effect SDs pooled as plain means across imputations.
    pub re_sd: [f64; 3],
}

pub fn rubin_pool(fits: &[AnalysisFit]) -> Result<PooledResult, Error> {
    if fits.len() < 2 {
        return Err(Error::Pooling(format!(
            "Rubin pooling needs m >= 2 analyses, got {}",
            fits.len()
        )));
    }
    let mut estimates = [0.0; 3];
    let mut ses = [0.0; 3];
    let mut ci = [(0.0, 0.0); 3];
    let mut re = [0.0; 3];
    for j in 0..3 {
        let est: Vec<f64> = fits.iter().map(|f| f.estimates[j]).collect();
        let se: Vec<f64> = fits.iter().map(|f| f.ses[j]).collect();
        let comb = rubin_combine(&est, &se)?;
        estimates[j] = comb.q_bar;
        ses[j] = comb.total.sqrt();
        ci[j] = comb.ci;
        re[j] = fits.iter().map(|f| f.re_sd[j]).sum::<f64>() / fits.len() as f64;
    }
    Ok(PooledResult {
        estimates,
        ses,
        ci,
        re_sd: re,
    })
}
