//! TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sim::{SimConfig, PLAN_ALL_ZEROS};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub missing_rates: Vec<f64>,
    pub gammas: Vec<f64>,
    pub methods: Vec<Method>,
    /// Repetitions per cell.
    pub seeds: usize,
    /// Alternate plan scored by the counterfactual metric.
    pub plan: String,
    /// Writes wall-clock seconds into `grid.csv`; off keeps it byte-stable.
    pub record_runtime: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            missing_rates: vec![0.0, 0.15, 0.30],
            gammas: vec![0.0, 0.2, 0.4],
            methods: Method::ALL.to_vec(),
            seeds: 5,
            plan: PLAN_ALL_ZEROS.into(),
            record_runtime: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub grid: GridConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Full configuration with every field written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.grid;
        if g.seeds == 0 || g.missing_rates.is_empty() || g.gammas.is_empty() || g.methods.is_empty() {
            return Err(Error::contract("grid needs at least one seed, rate, gamma and method"));
        }
        if g.missing_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::contract("missing rates must lie in [0, 1)"));
        }
        if g.gammas.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("gammas must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_partial_files() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("[train]\nepochs = 3\n[grid]\nmethods = [\"msm\"]\n").unwrap();
        assert_eq!(partial.train.epochs, 3);
        assert_eq!(partial.grid.methods, vec![Method::Msm]);
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[grid]\nseeds = 0\n").is_err());
    }
}
