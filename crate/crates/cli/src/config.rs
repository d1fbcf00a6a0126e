//! Run configuration: one JSON file carrying the imputation specs, method
//! options, and simulation scenarios. Unknown keys are rejected.

use heckmi::error::Error;
use heckmi::meta::PsiStructure;
use heckmi::mice::ImputationSpec;
use heckmi::sim::ScenarioConfig;
use serde::Deserialize;
use std::path::Path;

fn default_m() -> usize {
    5
}

fn default_iterations() -> usize {
    10
}

fn default_psi() -> PsiStructure {
    PsiStructure::Full
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputationConfig {
    pub cluster_column: String,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_psi")]
    pub psi_structure: PsiStructure,
    pub specs: Vec<ImputationSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenarios: Vec<ScenarioConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub imputation: Option<ImputationConfig>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if let Some(imp) = &self.imputation {
            if imp.specs.is_empty() {
                return Err(Error::Config("imputation.specs is empty".into()));
            }
            if imp.m < 1 {
                return Err(Error::Config("imputation.m must be >= 1".into()));
            }
            for spec in &imp.specs {
                spec.validate()?;
            }
        }
        if let Some(sim) = &self.simulation {
            if sim.scenarios.is_empty() {
                return Err(Error::Config("simulation.scenarios is empty".into()));
            }
            for sc in &sim.scenarios {
                sc.validate()?;
            }
        }
        Ok(())
    }
}
