//! Univariate and chained-equations imputation orchestration: classify
//! clusters, fit the stage-1 models, pool, draw, and fill — producing m
//! completed datasets with full provenance.
//!
//! Methods:
//! - `heckman_2l`: cluster-level selection-model FIML pooled by
//!   random-effects meta-analysis, shrunken cluster draws, selection-aware
//!   value draws. Clusters that are systematically missing or not estimable
//!   fall back to purely marginal parameter draws.
//! - `mar_2l`: the identical two-stage pipeline with the selection equation
//!   dropped and ρ ≡ 0 (normal / probit two-stage imputation under MAR).
//! - `heckman_1l`: a single pooled selection model ignoring clustering;
//!   parameters are drawn from N(θ̂, Ŝ) only.

use crate::data::TabularDataset;
use crate::error::{Error, NonEstimable};
use crate::heckman::{
    fit_cluster, least_squares, min_observed_rows, probit, ClusterData, ClusterFit, Family,
    HeckmanParams,
};
use crate::impute::{
    draw_cluster, draw_marginal, impute_binary, impute_continuous, DrawnClusterParams,
};
use crate::meta::{pool_heckman, reml_multivariate, reml_univariate, MarginalModel, MetaInput, PsiStructure};
use crate::numerics::draws::draw_mvnormal;
use crate::numerics::RngStream;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "heckman_2l")]
    Heckman2l,
    #[serde(rename = "mar_2l")]
    Mar2l,
    #[serde(rename = "heckman_1l")]
    Heckman1l,
}

/// Declaration of one incomplete variable and its imputation model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputationSpec {
    pub target: String,
    pub family: Family,
    pub outcome_predictors: Vec<String>,
    pub selection_predictors: Vec<String>,
    pub method: Method,
}

impl ImputationSpec {
    /// Heckman methods require at least one exclusion-restriction variable:
    /// a selection predictor absent from the outcome predictors. The target
    /// may never predict itself.
    pub fn validate(&self) -> Result<(), Error> {
        if self.outcome_predictors.contains(&self.target)
            || self.selection_predictors.contains(&self.target)
        {
            return Err(Error::Config(format!(
                "spec {}: target appears among its own predictors",
                self.target
            )));
        }
        if matches!(self.method, Method::Heckman2l | Method::Heckman1l) {
            let has_erv = self
                .selection_predictors
                .iter()
                .any(|c| !self.outcome_predictors.contains(c));
            if !has_erv {
                return Err(Error::Config(format!(
                    "spec {}: selection predictors contain no exclusion restriction variable",
                    self.target
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub m: usize,
    pub iterations: usize,
    pub psi_structure: PsiStructure,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            m: 5,
            iterations: 10,
            psi_structure: PsiStructure::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatusKind {
    Estimable,
    SystematicallyMissing,
    TooFewObserved,
    FitFailed,
    NotConverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterStatus {
    pub cluster_id: String,
    pub n_rows: usize,
    pub n_observed: usize,
    pub status: ClusterStatusKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Back-transformed correlation estimate with a Wald 95% interval on the
    /// atanh scale, for estimable selection-model fits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProjectionSummary {
    pub n_draws: usize,
    pub n_projected: usize,
    pub max_distance: f64,
    pub total_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecDiagnostics {
    pub target: String,
    pub clusters: Vec<ClusterStatus>,
    pub psi_projection: ProjectionSummary,
    pub binary_probability_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub base_path: Vec<u64>,
    pub specs: Vec<ImputationSpec>,
    pub diagnostics: Vec<SpecDiagnostics>,
    /// Mean of the filled cells per chain, iteration, and spec (chained mode
    /// only); the usual trace for judging chain convergence.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub chain_means: Vec<Vec<Vec<f64>>>,
}

/// m completed datasets plus provenance. Completed tables have no missing
/// cells in any target column; all other cells are bitwise identical to the
/// input.
#[derive(Debug, Clone)]
pub struct MIDataset {
    pub m: usize,
    pub completed: Vec<TabularDataset>,
    pub provenance: Provenance,
}

/// Resolved column indices for one spec against a dataset.
struct SpecFrame {
    target: usize,
    outcome_cols: Vec<usize>,
    selection_cols: Vec<usize>,
    clusters: Vec<(String, Vec<usize>)>,
}

impl SpecFrame {
    fn resolve(data: &TabularDataset, spec: &ImputationSpec) -> Result<Self, Error> {
        let target = data.column_index(&spec.target)?;
        let outcome_cols = spec
            .outcome_predictors
            .iter()
            .map(|n| data.column_index(n))
            .collect::<Result<Vec<_>, _>>()?;
        let selection_cols = match spec.method {
            Method::Mar2l => Vec::new(),
            _ => spec
                .selection_predictors
                .iter()
                .map(|n| data.column_index(n))
                .collect::<Result<Vec<_>, _>>()?,
        };
        Ok(Self {
            target,
            outcome_cols,
            selection_cols,
            clusters: data.cluster_groups(),
        })
    }

    /// p including the intercept.
    fn p(&self) -> usize {
        self.outcome_cols.len() + 1
    }

    /// q including the intercept; 0 when there is no selection equation.
    fn q(&self) -> usize {
        if self.selection_cols.is_empty() {
            0
        } else {
            self.selection_cols.len() + 1
        }
    }
}

fn design_rows(
    data: &TabularDataset,
    cols: &[usize],
    rows: &[usize],
) -> Result<DMatrix<f64>, Error> {
    let mut x = DMatrix::zeros(rows.len(), cols.len() + 1);
    for (i, &row) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        for (j, &col) in cols.iter().enumerate() {
            let v = match data.numeric_at(col, row) {
                Some(v) => v,
                None => {
                    return Err(Error::Imputation(format!(
                        "predictor column {} has a missing value at row {row}",
                        data.names()[col]
                    )))
                }
            };
            x[(i, j + 1)] = v;
        }
    }
    Ok(x)
}

/// ClusterData for fitting: y honours the ORIGINAL missingness mask of the
/// target (fills never contribute to the fit), predictors use the current
/// working values.
fn cluster_data(
    data: &TabularDataset,
    frame: &SpecFrame,
    cluster: &(String, Vec<usize>),
) -> Result<ClusterData, Error> {
    let (id, rows) = cluster;
    let x_outcome = design_rows(data, &frame.outcome_cols, rows)?;
    let x_selection = if frame.q() > 0 {
        design_rows(data, &frame.selection_cols, rows)?
    } else {
        DMatrix::zeros(rows.len(), 0)
    };
    let mut y = DVector::from_element(rows.len(), f64::NAN);
    let mut r = Vec::with_capacity(rows.len());
    for (i, &row) in rows.iter().enumerate() {
        let observed = !data.originally_missing(frame.target, row);
        r.push(observed);
        if observed {
            y[i] = data
                .numeric_at(frame.target, row)
                .ok_or_else(|| Error::Data(format!("target not numeric at row {row}")))?;
        }
    }
    // the selection design needs >= 1 column even for the MAR pipeline,
    // where it is ignored; use the intercept-only matrix in that case
    let x_selection = if x_selection.ncols() == 0 {
        DMatrix::from_element(rows.len(), 1, 1.0)
    } else {
        x_selection
    };
    ClusterData::new(id.clone(), x_outcome, x_selection, y, r)
}

/// Partition of clusters for a two-level method.
#[derive(Debug, Clone)]
pub struct ClusterPartition {
    pub estimable: Vec<String>,
    pub fallback: Vec<String>,
}

fn min_rows_for(spec: &ImputationSpec, p: usize, q: usize) -> usize {
    match spec.method {
        Method::Heckman2l | Method::Heckman1l => min_observed_rows(p, q),
        Method::Mar2l => match spec.family {
            Family::Continuous => 2 * (p + 1),
            Family::Binary => 2 * p,
        },
    }
}

/// Classify clusters as estimable or fallback: a cluster falls back when the
/// target is 100% missing there (systematic missingness) or when it fails
/// the minimum-data rule. Errors when no cluster is estimable.
pub fn classify_clusters(
    data: &TabularDataset,
    spec: &ImputationSpec,
) -> Result<ClusterPartition, Error> {
    spec.validate()?;
    let frame = SpecFrame::resolve(data, spec)?;
    let min_rows = min_rows_for(spec, frame.p(), frame.q());
    let mut estimable = Vec::new();
    let mut fallback = Vec::new();
    for (id, rows) in &frame.clusters {
        let n_obs = rows
            .iter()
            .filter(|&&r| !data.originally_missing(frame.target, r))
            .count();
        if n_obs == 0 || n_obs < min_rows {
            fallback.push(id.clone());
        } else {
            estimable.push(id.clone());
        }
    }
    if estimable.is_empty() {
        return Err(Error::Imputation(format!(
            "spec {}: no cluster has enough observed data",
            spec.target
        )));
    }
    Ok(ClusterPartition {
        estimable,
        fallback,
    })
}

/// Stage-1 fitted state, reused across imputations.
enum FittedModel {
    TwoLevel {
        fits: HashMap<String, ClusterFit>,
        model: MarginalModel,
    },
    OneLevel {
        fit: ClusterFit,
    },
}

fn rho_summary(fit: &ClusterFit) -> (Option<f64>, Option<(f64, f64)>) {
    let idx = fit.vcov.dim() - 1;
    let se = fit.vcov.as_matrix()[(idx, idx)].max(0.0).sqrt();
    let z = fit.params.atanh_rho;
    let rho = fit.params.rho().value();
    let lo = libm::tanh(z - 1.959963984540054 * se);
    let hi = libm::tanh(z + 1.959963984540054 * se);
    (Some(rho), Some((lo, hi)))
}

/// Fit a MAR cluster (no selection equation): least squares for continuous,
/// probit for binary. Packed into a ClusterFit with an empty selection block
/// so the downstream draw machinery is shared.
fn fit_mar_cluster(data: &ClusterData, family: Family) -> Result<ClusterFit, NonEstimable> {
    let obs: Vec<usize> = (0..data.n_rows()).filter(|&i| data.r[i]).collect();
    let p = data.x_outcome.ncols();
    let mut x = DMatrix::zeros(obs.len(), p);
    let mut y = DVector::zeros(obs.len());
    for (i, &row) in obs.iter().enumerate() {
        for j in 0..p {
            x[(i, j)] = data.x_outcome[(row, j)];
        }
        y[i] = data.y[row];
    }
    match family {
        Family::Continuous => {
            let ols = least_squares(&x, &y).map_err(|_| NonEstimable::OptimizerFailed)?;
            let dim = p + 1;
            let mut vcov = DMatrix::zeros(dim, dim);
            for i in 0..p {
                for j in 0..p {
                    vcov[(i, j)] = ols.vcov.as_matrix()[(i, j)];
                }
            }
            // var(log sigma-hat) ~ 1/(2(n-p)) from the chi-square sampling law
            vcov[(p, p)] = 1.0 / (2.0 * (obs.len().saturating_sub(p)).max(1) as f64);
            let sigma2 = ols.sigma2.max(1e-12);
            Ok(ClusterFit {
                cluster_id: data.cluster_id.clone(),
                params: HeckmanParams {
                    beta_o: ols.beta,
                    beta_s: DVector::zeros(0),
                    log_sigma: Some(0.5 * libm::log(sigma2)),
                    atanh_rho: 0.0,
                },
                vcov: crate::numerics::matrix::nearest_psd(&vcov)
                    .map_err(|_| NonEstimable::OptimizerFailed)?,
                converged: true,
                n_obs: obs.len(),
                family,
            })
        }
        Family::Binary => {
            let yv: Vec<f64> = y.iter().copied().collect();
            let fit = probit(&yv, &x)?;
            Ok(ClusterFit {
                cluster_id: data.cluster_id.clone(),
                params: HeckmanParams {
                    beta_o: fit.beta,
                    beta_s: DVector::zeros(0),
                    log_sigma: None,
                    atanh_rho: 0.0,
                },
                vcov: fit.vcov,
                converged: fit.converged,
                n_obs: obs.len(),
                family,
            })
        }
    }
}

/// Pool MAR cluster fits: coefficient block plus (continuous) log σ block.
fn pool_mar(
    fits: &[ClusterFit],
    family: Family,
    structure: PsiStructure,
) -> Result<MarginalModel, Error> {
    let usable: Vec<&ClusterFit> = fits.iter().filter(|f| f.converged).collect();
    if usable.len() < 2 {
        return Err(Error::Pooling(format!(
            "need >= 2 converged cluster fits, got {}",
            usable.len()
        )));
    }
    let p = usable[0].params.beta_o.len();
    let beta_in = MetaInput::new(
        usable.iter().map(|f| f.params.beta_o.clone()).collect(),
        usable
            .iter()
            .map(|f| f.vcov.principal_submatrix(0..p))
            .collect(),
    )?;
    let block_o = reml_multivariate(&beta_in, structure)?;
    let meta_log_sigma = match family {
        Family::Continuous => {
            let sig_in = MetaInput::new(
                usable
                    .iter()
                    .map(|f| DVector::from_column_slice(&[f.params.log_sigma.unwrap()]))
                    .collect(),
                usable
                    .iter()
                    .map(|f| f.vcov.principal_submatrix(p..p + 1))
                    .collect(),
            )?;
            Some(reml_univariate(&sig_in)?)
        }
        Family::Binary => None,
    };
    Ok(MarginalModel {
        family,
        p,
        q: 0,
        block_o,
        block_s: None,
        meta_log_sigma,
        meta_atanh_rho: None,
        contributing_clusters: usable.iter().map(|f| f.cluster_id.clone()).collect(),
    })
}

/// Fit stage 1 for a spec against the current working data. Returns the
/// fitted state and per-cluster statuses.
fn fit_stage(
    data: &TabularDataset,
    spec: &ImputationSpec,
    opts: &EngineOptions,
) -> Result<(FittedModel, Vec<ClusterStatus>), Error> {
    let frame = SpecFrame::resolve(data, spec)?;
    match spec.method {
        Method::Heckman1l => {
            let all_rows: Vec<usize> = (0..data.n_rows()).collect();
            let pooled = ("(all)".to_string(), all_rows);
            let cd = cluster_data(data, &frame, &pooled)?;
            let fit = fit_cluster(&cd, spec.family)
                .map_err(|e| Error::Imputation(format!("pooled fit failed: {e}")))?;
            let status = ClusterStatus {
                cluster_id: "(all)".into(),
                n_rows: cd.n_rows(),
                n_observed: cd.n_observed(),
                status: if fit.converged {
                    ClusterStatusKind::Estimable
                } else {
                    ClusterStatusKind::NotConverged
                },
                detail: None,
                rho_hat: rho_summary(&fit).0,
                rho_ci: rho_summary(&fit).1,
            };
            Ok((FittedModel::OneLevel { fit }, vec![status]))
        }
        Method::Heckman2l | Method::Mar2l => {
            let min_rows = min_rows_for(spec, frame.p(), frame.q());
            let tasks: Vec<(String, ClusterData)> = frame
                .clusters
                .iter()
                .map(|c| cluster_data(data, &frame, c).map(|cd| (c.0.clone(), cd)))
                .collect::<Result<Vec<_>, _>>()?;
            let results: Vec<(String, usize, usize, Result<ClusterFit, NonEstimable>)> = tasks
                .par_iter()
                .map(|(id, cd)| {
                    let n_obs = cd.n_observed();
                    let res = if n_obs == 0 {
                        Err(NonEstimable::NoSelectionVariation)
                    } else if n_obs < min_rows {
                        Err(NonEstimable::TooFewObserved {
                            needed: min_rows,
                            got: n_obs,
                        })
                    } else {
                        match spec.method {
                            Method::Heckman2l => fit_cluster(cd, spec.family),
                            Method::Mar2l => fit_mar_cluster(cd, spec.family),
                            Method::Heckman1l => unreachable!(),
                        }
                    };
                    (id.clone(), cd.n_rows(), n_obs, res)
                })
                .collect();

            let mut statuses = Vec::with_capacity(results.len());
            let mut fits = HashMap::new();
            let mut contributing = Vec::new();
            for (id, n_rows, n_obs, res) in results {
                let status = match &res {
                    Ok(fit) if fit.converged => ClusterStatus {
                        cluster_id: id.clone(),
                        n_rows,
                        n_observed: n_obs,
                        status: ClusterStatusKind::Estimable,
                        detail: None,
                        rho_hat: if spec.method == Method::Heckman2l {
                            rho_summary(fit).0
                        } else {
                            None
                        },
                        rho_ci: if spec.method == Method::Heckman2l {
                            rho_summary(fit).1
                        } else {
                            None
                        },
                    },
                    Ok(_) => ClusterStatus {
                        cluster_id: id.clone(),
                        n_rows,
                        n_observed: n_obs,
                        status: ClusterStatusKind::NotConverged,
                        detail: Some("optimizer did not converge; treated as fallback".into()),
                        rho_hat: None,
                        rho_ci: None,
                    },
                    Err(e) => ClusterStatus {
                        cluster_id: id.clone(),
                        n_rows,
                        n_observed: n_obs,
                        status: match e {
                            NonEstimable::NoSelectionVariation if n_obs == 0 => {
                                ClusterStatusKind::SystematicallyMissing
                            }
                            NonEstimable::TooFewObserved { .. } => {
                                ClusterStatusKind::TooFewObserved
                            }
                            _ => ClusterStatusKind::FitFailed,
                        },
                        detail: Some(e.to_string()),
                        rho_hat: None,
                        rho_ci: None,
                    },
                };
                statuses.push(status);
                if let Ok(fit) = res {
                    if fit.converged {
                        contributing.push(fit.clone());
                        fits.insert(id, fit);
                    }
                }
            }

            let model = match spec.method {
                Method::Heckman2l => pool_heckman(&contributing, opts.psi_structure),
                Method::Mar2l => pool_mar(&contributing, spec.family, opts.psi_structure),
                Method::Heckman1l => unreachable!(),
            }
            .map_err(|e| {
                Error::Imputation(format!(
                    "spec {}: pooling failed ({e}); cluster statuses: {}",
                    spec.target,
                    statuses
                        .iter()
                        .map(|s| format!("{}={:?}", s.cluster_id, s.status))
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })?;
            Ok((FittedModel::TwoLevel { fits, model }, statuses))
        }
    }
}

/// One draw pass: draw parameters and fill every originally-missing target
/// cell in `working`. `rng` must be the imputation-level stream.
fn draw_and_fill(
    fitted: &FittedModel,
    working: &mut TabularDataset,
    spec: &ImputationSpec,
    rng: &mut RngStream,
    projection: &mut ProjectionSummary,
    binary_fallbacks: &mut usize,
) -> Result<(), Error> {
    let frame = SpecFrame::resolve(working, spec)?;
    match fitted {
        FittedModel::TwoLevel { fits, model } => {
            let dm = draw_marginal(model, rng)?;
            projection.n_draws += 1;
            if dm.projection_distance > 0.0 {
                projection.n_projected += 1;
                projection.total_distance += dm.projection_distance;
                projection.max_distance = projection.max_distance.max(dm.projection_distance);
            }
            for (c_idx, cluster) in frame.clusters.iter().enumerate() {
                let missing_rows: Vec<usize> = cluster
                    .1
                    .iter()
                    .copied()
                    .filter(|&r| working.originally_missing(frame.target, r))
                    .collect();
                let mut rng_c = rng.split(c_idx as u64);
                let dc = draw_cluster(&cluster.0, fits.get(&cluster.0), &dm, &mut rng_c)?;
                if missing_rows.is_empty() {
                    continue;
                }
                fill_rows(working, &frame, spec, &missing_rows, &dc, &mut rng_c, binary_fallbacks)?;
            }
            Ok(())
        }
        FittedModel::OneLevel { fit } => {
            let theta = draw_mvnormal(rng, &fit.params.to_vector(), &fit.vcov)?;
            let params = HeckmanParams::from_vector(
                &theta,
                fit.params.beta_o.len(),
                fit.params.beta_s.len(),
                spec.family,
            );
            let dc = DrawnClusterParams {
                cluster_id: "(all)".into(),
                beta_o_star: params.beta_o.clone(),
                beta_s_star: params.beta_s.clone(),
                sigma_star: params.sigma(),
                rho_star: params.rho(),
            };
            let missing_rows: Vec<usize> = (0..working.n_rows())
                .filter(|&r| working.originally_missing(frame.target, r))
                .collect();
            if missing_rows.is_empty() {
                return Ok(());
            }
            fill_rows(working, &frame, spec, &missing_rows, &dc, rng, binary_fallbacks)
        }
    }
}

fn fill_rows(
    working: &mut TabularDataset,
    frame: &SpecFrame,
    spec: &ImputationSpec,
    rows: &[usize],
    dc: &DrawnClusterParams,
    rng: &mut RngStream,
    binary_fallbacks: &mut usize,
) -> Result<(), Error> {
    let x_o = design_rows(working, &frame.outcome_cols, rows)?;
    let x_s = if frame.q() > 0 {
        design_rows(working, &frame.selection_cols, rows)?
    } else {
        DMatrix::zeros(rows.len(), 0)
    };
    let values = match spec.family {
        Family::Continuous => impute_continuous(&x_o, &x_s, dc, rng)?,
        Family::Binary => {
            let (vals, fb) = impute_binary(&x_o, &x_s, dc, rng)?;
            *binary_fallbacks += fb;
            vals
        }
    };
    for (&row, &v) in rows.iter().zip(values.iter()) {
        working.set_value(frame.target, row, v)?;
    }
    Ok(())
}

fn prepare_dataset(data: &TabularDataset, specs: &[ImputationSpec]) -> Result<TabularDataset, Error> {
    let mut prepared = data.clone();
    let target_names: Vec<&String> = specs.iter().map(|s| &s.target).collect();
    for spec in specs {
        spec.validate()?;
        if spec.family == Family::Binary {
            prepared.normalize_binary_column(&spec.target)?;
        } else {
            // must be numeric
            prepared.numeric_column(&spec.target)?;
        }
        // predictors must be fully observed unless they are targets themselves
        for name in spec
            .outcome_predictors
            .iter()
            .chain(spec.selection_predictors.iter())
        {
            if target_names.iter().any(|t| *t == name) {
                continue;
            }
            prepared.numeric_column(name)?;
            if prepared.n_originally_missing(name)? > 0 {
                return Err(Error::Data(format!(
                    "predictor {name} has missing values but is not an imputation target"
                )));
            }
        }
    }
    Ok(prepared)
}

/// Impute a single incomplete variable, producing m completed datasets.
/// Stage-1 fits run once and are reused across imputations; imputations are
/// keyed by split streams so they are exchangeable and reproducible.
pub fn impute_univariate(
    data: &TabularDataset,
    spec: &ImputationSpec,
    opts: &EngineOptions,
    rng: &RngStream,
) -> Result<MIDataset, Error> {
    let specs = vec![spec.clone()];
    let prepared = prepare_dataset(data, &specs)?;
    let target_idx = prepared.column_index(&spec.target)?;
    let n_missing = (0..prepared.n_rows())
        .filter(|&r| prepared.originally_missing(target_idx, r))
        .count();

    if n_missing == 0 {
        // nothing to impute: completed copies of the input
        let diagnostics = vec![SpecDiagnostics {
            target: spec.target.clone(),
            clusters: classify_clusters(&prepared, spec)?
                .estimable
                .into_iter()
                .map(|id| ClusterStatus {
                    cluster_id: id,
                    n_rows: 0,
                    n_observed: 0,
                    status: ClusterStatusKind::Estimable,
                    detail: Some("target fully observed; imputation is a no-op".into()),
                    rho_hat: None,
                    rho_ci: None,
                })
                .collect(),
            psi_projection: ProjectionSummary::default(),
            binary_probability_fallbacks: 0,
        }];
        return Ok(MIDataset {
            m: opts.m,
            completed: vec![prepared.clone(); opts.m],
            provenance: Provenance {
                master_seed: rng.master_seed(),
                base_path: rng.path().to_vec(),
                specs,
                diagnostics,
                chain_means: Vec::new(),
            },
        });
    }

    let (fitted, statuses) = fit_stage(&prepared, spec, opts)?;
    let mut projection = ProjectionSummary::default();
    let mut binary_fallbacks = 0usize;
    let mut completed = Vec::with_capacity(opts.m);
    for k in 1..=opts.m {
        let mut rng_k = rng.split(k as u64);
        let mut working = prepared.clone();
        draw_and_fill(
            &fitted,
            &mut working,
            spec,
            &mut rng_k,
            &mut projection,
            &mut binary_fallbacks,
        )?;
        completed.push(working);
    }
    Ok(MIDataset {
        m: opts.m,
        completed,
        provenance: Provenance {
            master_seed: rng.master_seed(),
            base_path: rng.path().to_vec(),
            specs,
            diagnostics: vec![SpecDiagnostics {
                target: spec.target.clone(),
                clusters: statuses,
                psi_projection: projection,
                binary_probability_fallbacks: binary_fallbacks,
            }],
            chain_means: Vec::new(),
        },
    })
}

/// Chained-equations imputation over several incomplete variables. Missing
/// cells start from per-cluster observed-marginal draws; each of the
/// `iterations` rounds refits every spec against the current working data
/// (predictors may themselves be imputed) and redraws its missing cells.
/// Chains k = 1..m are independent and keyed by split streams.
pub fn impute_chained(
    data: &TabularDataset,
    specs: &[ImputationSpec],
    opts: &EngineOptions,
    rng: &RngStream,
) -> Result<MIDataset, Error> {
    if specs.is_empty() {
        return Err(Error::Config("no imputation specs".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for s in specs {
        if !seen.insert(&s.target) {
            return Err(Error::Config(format!("duplicate target {}", s.target)));
        }
    }
    let prepared = prepare_dataset(data, specs)?;

    let chain_results: Vec<Result<(TabularDataset, Vec<SpecDiagnostics>, Vec<Vec<f64>>), Error>> = (1..=opts.m)
        .into_par_iter()
        .map(|k| {
            let chain_rng = rng.split(k as u64);
            run_chain(&prepared, specs, opts, &chain_rng)
                .map_err(|e| Error::Imputation(format!("chain {k}: {e}")))
        })
        .collect();

    let mut completed = Vec::with_capacity(opts.m);
    let mut diagnostics: Option<Vec<SpecDiagnostics>> = None;
    let mut chain_means = Vec::with_capacity(opts.m);
    for res in chain_results {
        let (table, diag, trace) = res?;
        if diagnostics.is_none() {
            diagnostics = Some(diag);
        }
        chain_means.push(trace);
        completed.push(table);
    }
    Ok(MIDataset {
        m: opts.m,
        completed,
        provenance: Provenance {
            master_seed: rng.master_seed(),
            base_path: rng.path().to_vec(),
            specs: specs.to_vec(),
            diagnostics: diagnostics.unwrap_or_default(),
            chain_means,
        },
    })
}

fn filled_mean(data: &TabularDataset, target: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for row in 0..data.n_rows() {
        if data.originally_missing(target, row) {
            if let Some(v) = data.numeric_at(target, row) {
                sum += v;
                n += 1.0;
            }
        }
    }
    if n > 0.0 {
        sum / n
    } else {
        f64::NAN
    }
}

fn run_chain(
    prepared: &TabularDataset,
    specs: &[ImputationSpec],
    opts: &EngineOptions,
    chain_rng: &RngStream,
) -> Result<(TabularDataset, Vec<SpecDiagnostics>, Vec<Vec<f64>>), Error> {
    let mut working = prepared.clone();

    // initialization: fill missing cells with draws from the observed values
    // of the same cluster (global pool when a cluster has none)
    for (si, spec) in specs.iter().enumerate() {
        let frame = SpecFrame::resolve(&working, spec)?;
        let mut init_rng = chain_rng.split(0).split(si as u64);
        let global_pool: Vec<f64> = (0..working.n_rows())
            .filter(|&r| !working.originally_missing(frame.target, r))
            .filter_map(|r| working.numeric_at(frame.target, r))
            .collect();
        if global_pool.is_empty() {
            return Err(Error::Imputation(format!(
                "spec {}: no observed values anywhere",
                spec.target
            )));
        }
        for (id, rows) in &frame.clusters {
            let _ = id;
            let pool: Vec<f64> = rows
                .iter()
                .filter(|&&r| !working.originally_missing(frame.target, r))
                .filter_map(|&r| working.numeric_at(frame.target, r))
                .collect();
            let pool = if pool.is_empty() { &global_pool } else { &pool };
            for &row in rows {
                if working.originally_missing(frame.target, row) {
                    let v = pool[init_rng.uniform_index(pool.len())];
                    working.set_value(frame.target, row, v)?;
                }
            }
        }
    }

    let mut last_diags: Vec<SpecDiagnostics> = Vec::new();
    // entry 0 of the trace is the post-initialization state; iterations
    // append one entry each, so the burn-in jump is visible
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(opts.iterations + 1);
    let init_means = specs
        .iter()
        .map(|spec| {
            working
                .column_index(&spec.target)
                .map(|t| filled_mean(&working, t))
                .unwrap_or(f64::NAN)
        })
        .collect();
    trace.push(init_means);
    for it in 1..=opts.iterations {
        last_diags.clear();
        for (si, spec) in specs.iter().enumerate() {
            let (fitted, statuses) = fit_stage(&working, spec, opts)?;
            let mut projection = ProjectionSummary::default();
            let mut binary_fallbacks = 0usize;
            let mut draw_rng = chain_rng.split(it as u64).split(si as u64);
            draw_and_fill(
                &fitted,
                &mut working,
                spec,
                &mut draw_rng,
                &mut projection,
                &mut binary_fallbacks,
            )?;
            last_diags.push(SpecDiagnostics {
                target: spec.target.clone(),
                clusters: statuses,
                psi_projection: projection,
                binary_probability_fallbacks: binary_fallbacks,
            });
        }
        let iter_means = specs
            .iter()
            .map(|spec| {
                working
                    .column_index(&spec.target)
                    .map(|t| filled_mean(&working, t))
                    .unwrap_or(f64::NAN)
            })
            .collect();
        trace.push(iter_means);
    }
    Ok((working, last_diags, trace))
}
