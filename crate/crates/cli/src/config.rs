//! Run configuration: one TOML file holding every experiment constant, with
//! command-line flags layered on top.

use std::path::{Path, PathBuf};

use ctsid::control::ControllerConfig;
use ctsid::pipeline::IdentifyConfig;
use ctsid::plant::DatasetConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub identify: IdentifyConfig,
    pub controller: ControllerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            identify: IdentifyConfig::default(),
            controller: ControllerConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenarios: Option<usize>,
    pub nsr: Option<f64>,
    pub degree: Option<usize>,
    pub orders: Option<Vec<usize>>,
    pub eta: Option<f64>,
    pub kappa: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text, path)
    }

    /// `--seed` drives both the dataset and the closed-loop noise; `--nsr`
    /// applies to whichever stage the command runs.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.dataset.master_seed = seed;
            self.controller.seed = seed;
        }
        if let Some(n) = o.scenarios {
            self.dataset.n_scenarios = n;
        }
        if let Some(nsr) = o.nsr {
            self.dataset.nsr = nsr;
            self.controller.nsr = nsr;
        }
        if let Some(d) = o.degree {
            self.identify.degree = d;
        }
        if let Some(orders) = &o.orders {
            self.identify.orders = orders.clone();
        }
        if let Some(eta) = o.eta {
            self.identify.eta = eta;
        }
        if let Some(k) = o.kappa {
            self.controller.kappa = k;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to toml")
    }
}
