//! Clustered dataset generation for the simulation study.
//!
//! Each cluster draws covariate means, per-coefficient random effects that
//! are correlated across the outcome and selection equations, and an error
//! scale; rows then get covariates, correlated errors (normal, skew-t, or
//! independent under the explicit missingness process), latent outcome and
//! selection values, and the resulting observed/missing pattern. A fixed
//! fraction of clusters is made systematically missing.

use crate::data::TabularDataset;
use crate::error::Error;
use crate::heckman::Family;
use crate::numerics::draws::{draw_bernoulli, draw_bvn_skew_t, draw_mvnormal, draw_normal};
use crate::numerics::matrix::SpdMatrix;
use crate::numerics::RngStream;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorModel {
    Bvn,
    SkewT,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMethod {
    #[serde(rename = "cca")]
    Cca,
    #[serde(rename = "heckman_1l")]
    Heckman1l,
    #[serde(rename = "mar_2l")]
    Mar2l,
    #[serde(rename = "heckman_2l")]
    Heckman2l,
}

impl SimMethod {
    pub fn label(self) -> &'static str {
        match self {
            SimMethod::Cca => "cca",
            SimMethod::Heckman1l => "heckman_1l",
            SimMethod::Mar2l => "mar_2l",
            SimMethod::Heckman2l => "heckman_2l",
        }
    }
}

fn default_m() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub family: Family,
    pub rho: f64,
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub error_model: ErrorModel,
    pub n_reps: usize,
    pub seed: u64,
    pub methods: Vec<SimMethod>,
    #[serde(default = "default_m")]
    pub m: usize,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.rho.is_finite() && self.rho.abs() < 1.0) {
            return Err(Error::Config(format!(
                "scenario {}: rho {} not strictly inside (-1,1)",
                self.name, self.rho
            )));
        }
        if self.n_clusters < 2 {
            return Err(Error::Config(format!(
                "scenario {}: need >= 2 clusters",
                self.name
            )));
        }
        if self.cluster_size < 1 {
            return Err(Error::Config(format!(
                "scenario {}: cluster_size must be >= 1",
                self.name
            )));
        }
        if self.n_reps < 1 {
            return Err(Error::Config(format!(
                "scenario {}: n_reps must be >= 1",
                self.name
            )));
        }
        if self.m < 2 {
            return Err(Error::Config(format!(
                "scenario {}: m must be >= 2 for pooling",
                self.name
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config(format!(
                "scenario {}: no methods selected",
                self.name
            )));
        }
        Ok(())
    }
}

/// Fixed generating constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrueParams {
    pub beta_o: [f64; 3],
    pub beta_s: [f64; 4],
    /// Variance of the intercept/X1/X2 random effects in both equations.
    pub psi_coef: f64,
    /// Variance of the exclusion-restriction random effect.
    pub psi_erv: f64,
    /// Variance of log σ_i across clusters.
    pub log_sigma_var: f64,
    /// Cross-equation random-effect correlation as a fraction of ρ.
    pub re_cross_corr: f64,
    pub treatment_prob: f64,
    pub cluster_mean_cov: [[f64; 2]; 2],
    pub systematic_fraction: f64,
    /// Skew-t shape: outcome margin, selection margin.
    pub skew_alpha: (f64, f64),
    pub skew_df: f64,
    /// Slope of the latent outcome in the explicit missingness process.
    pub explicit_slope: f64,
}

impl Default for TrueParams {
    fn default() -> Self {
        Self {
            beta_o: [0.3, 1.0, 1.0],
            beta_s: [-0.8, 1.3, -0.7, 1.2],
            psi_coef: 0.4,
            psi_erv: 0.2,
            log_sigma_var: 0.05,
            re_cross_corr: 0.4,
            treatment_prob: 0.6,
            cluster_mean_cov: [[0.2, 0.015], [0.015, 0.2]],
            systematic_fraction: 0.2,
            skew_alpha: (-2.0, 6.0),
            skew_df: 4.0,
            explicit_slope: 0.3,
        }
    }
}

impl TrueParams {
    /// Truth values for the reported estimands.
    pub fn estimand_truth(&self) -> [(String, f64); 6] {
        [
            ("beta0".into(), self.beta_o[0]),
            ("beta1".into(), self.beta_o[1]),
            ("beta2".into(), self.beta_o[2]),
            ("sd_psi00".into(), self.psi_coef.sqrt()),
            ("sd_psi11".into(), self.psi_coef.sqrt()),
            ("sd_psi22".into(), self.psi_coef.sqrt()),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TruthRecord {
    pub beta_o: [f64; 3],
    pub re_sd: [f64; 3],
    /// Latent (pre-missingness, pre-binarization) outcome per row.
    pub latent_y: Vec<f64>,
    /// Latent selection score per row.
    pub latent_r: Vec<f64>,
    pub systematic_clusters: Vec<String>,
    /// Sporadically missing cells over the entire dataset.
    pub sporadic_missing_fraction: f64,
    pub total_missing_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub data: TabularDataset,
    pub truth: TruthRecord,
}

/// Generate one replicate dataset with columns cluster, X1, X2, X3, y, r.
pub fn generate(
    config: &ScenarioConfig,
    params: &TrueParams,
    rng: &RngStream,
) -> Result<GeneratedData, Error> {
    config.validate()?;
    let n_clusters = config.n_clusters;
    let n_rows = n_clusters * config.cluster_size;

    // systematically missing clusters: ceil(fraction * N) distinct indices
    let n_systematic = (params.systematic_fraction * n_clusters as f64).ceil() as usize;
    let mut sys_rng = rng.split(0);
    let mut indices: Vec<usize> = (0..n_clusters).collect();
    for i in 0..n_systematic.min(n_clusters) {
        let j = i + sys_rng.uniform_index(n_clusters - i);
        indices.swap(i, j);
    }
    let systematic: Vec<usize> = indices[..n_systematic.min(n_clusters)].to_vec();

    let mean_cov = SpdMatrix::new(DMatrix::from_row_slice(
        2,
        2,
        &[
            params.cluster_mean_cov[0][0],
            params.cluster_mean_cov[0][1],
            params.cluster_mean_cov[1][0],
            params.cluster_mean_cov[1][1],
        ],
    ))?;
    let re_corr = params.re_cross_corr * config.rho;
    let re_cov = SpdMatrix::new(DMatrix::from_row_slice(
        2,
        2,
        &[
            params.psi_coef,
            params.psi_coef * re_corr,
            params.psi_coef * re_corr,
            params.psi_coef,
        ],
    ))?;

    let width = (n_clusters as f64).log10().ceil().max(1.0) as usize;
    let mut cluster_labels = Vec::with_capacity(n_rows);
    let mut x1 = Vec::with_capacity(n_rows);
    let mut x2 = Vec::with_capacity(n_rows);
    let mut x3 = Vec::with_capacity(n_rows);
    let mut y_col: Vec<Option<f64>> = Vec::with_capacity(n_rows);
    let mut r_col = Vec::with_capacity(n_rows);
    let mut latent_y = Vec::with_capacity(n_rows);
    let mut latent_r = Vec::with_capacity(n_rows);
    let mut sporadic_missing = 0usize;

    for c in 0..n_clusters {
        let label = format!("c{c:0width$}");
        let mut crng = rng.split(1 + c as u64);
        let mu = draw_mvnormal(&mut crng, &DVector::zeros(2), &mean_cov)?;
        // per-coefficient random effects, linked across equations
        let mut b_o = [0.0f64; 3];
        let mut b_s = [0.0f64; 4];
        for k in 0..3 {
            let b = draw_mvnormal(&mut crng, &DVector::zeros(2), &re_cov)?;
            b_o[k] = b[0];
            b_s[k] = b[1];
        }
        b_s[3] = draw_normal(&mut crng, 0.0, params.psi_erv.sqrt())?;
        let sigma = libm::exp(draw_normal(&mut crng, 0.0, params.log_sigma_var.sqrt())?);
        let err_cov = SpdMatrix::new(DMatrix::from_row_slice(
            2,
            2,
            &[
                sigma * sigma,
                config.rho * sigma,
                config.rho * sigma,
                1.0,
            ],
        ))?;
        let is_systematic = systematic.contains(&c);

        for _ in 0..config.cluster_size {
            let t = f64::from(draw_bernoulli(&mut crng, params.treatment_prob)?);
            let v2 = draw_normal(&mut crng, mu[0], 1.0)?;
            let v3 = draw_normal(&mut crng, mu[1], 0.5f64.sqrt())?;
            let (e_o, e_s) = match config.error_model {
                ErrorModel::Bvn => {
                    let e = draw_mvnormal(&mut crng, &DVector::zeros(2), &err_cov)?;
                    (e[0], e[1])
                }
                ErrorModel::SkewT => draw_bvn_skew_t(
                    &mut crng,
                    &err_cov,
                    params.skew_alpha,
                    params.skew_df,
                )?,
                ErrorModel::Explicit => (
                    draw_normal(&mut crng, 0.0, sigma)?,
                    draw_normal(&mut crng, 0.0, 1.0)?,
                ),
            };
            let y_star = (params.beta_o[0] + b_o[0])
                + (params.beta_o[1] + b_o[1]) * t
                + (params.beta_o[2] + b_o[2]) * v2
                + e_o;
            let r_star = match config.error_model {
                ErrorModel::Explicit => params.explicit_slope * y_star + e_s,
                _ => {
                    (params.beta_s[0] + b_s[0])
                        + (params.beta_s[1] + b_s[1]) * t
                        + (params.beta_s[2] + b_s[2]) * v2
                        + (params.beta_s[3] + b_s[3]) * v3
                        + e_s
                }
            };
            let observed_sporadic = r_star >= 0.0;
            let observed = observed_sporadic && !is_systematic;
            if !observed_sporadic && !is_systematic {
                sporadic_missing += 1;
            }
            let y_value = match config.family {
                Family::Continuous => y_star,
                Family::Binary => f64::from(y_star > 0.0),
            };
            cluster_labels.push(label.clone());
            x1.push(Some(t));
            x2.push(Some(v2));
            x3.push(Some(v3));
            y_col.push(observed.then_some(y_value));
            r_col.push(Some(f64::from(observed)));
            latent_y.push(y_star);
            latent_r.push(r_star);
        }
    }

    let data = TabularDataset::from_numeric_columns(
        "cluster",
        cluster_labels,
        vec![
            ("X1".into(), x1),
            ("X2".into(), x2),
            ("X3".into(), x3),
            ("y".into(), y_col.clone()),
            ("r".into(), r_col),
        ],
    )?;
    let n_missing = y_col.iter().filter(|v| v.is_none()).count();
    let truth = TruthRecord {
        beta_o: params.beta_o,
        re_sd: [params.psi_coef.sqrt(); 3],
        latent_y,
        latent_r,
        systematic_clusters: systematic
            .iter()
            .map(|&c| format!("c{c:0width$}"))
            .collect(),
        sporadic_missing_fraction: sporadic_missing as f64 / n_rows as f64,
        total_missing_fraction: n_missing as f64 / n_rows as f64,
    };
    Ok(GeneratedData { data, truth })
}
