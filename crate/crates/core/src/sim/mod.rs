//! Simulation study harness: data generation under the evaluated scenarios,
//! the two-stage analysis estimator, Rubin pooling, and the performance
//! metrics (bias, coverage, CI width, RMSE, EmpSE with Monte Carlo standard
//! errors, convergence rate, runtime).

mod analyze;
mod generate;
mod metrics;

pub use analyze::{
    analyze_two_stage, rubin_combine, rubin_pool, AnalysisFit, PooledResult, RubinScalar,
};
pub use generate::{generate, ErrorModel, GeneratedData, ScenarioConfig, SimMethod, TrueParams, TruthRecord};
pub use metrics::{run_scenario, EstimandMetrics, MethodMetrics, MetricsReport, ScenarioMetrics};
