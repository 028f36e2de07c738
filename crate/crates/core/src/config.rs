//! Simulation study files: a grid of settings expanded into one
//! configuration per cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::simulation::{MethodSpec, Scenario, SimCalibration, SimulationConfig};

fn default_n() -> usize {
    500
}

fn default_p() -> f64 {
    0.5
}

fn default_tau() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.01
}

fn default_replications() -> usize {
    500
}

/// A study over every combination of `d`, `gamma` and `scenarios`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub d: Vec<usize>,
    pub gamma: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub calibration: SimCalibration,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))
    }

    /// One configuration per cell, in `d`, `gamma`, `scenario` order. Each
    /// cell gets its own seed derived from the study seed and its indices.
    pub fn cells(&self) -> Result<Vec<SimulationConfig>> {
        if self.d.is_empty() || self.gamma.is_empty() || self.scenarios.is_empty() || self.methods.is_empty() {
            return Err(Error::SchemaViolation("d, gamma, scenarios and methods must be non-empty".into()));
        }
        let mut out = Vec::new();
        for (i, &d) in self.d.iter().enumerate() {
            for (j, &g) in self.gamma.iter().enumerate() {
                for (k, &scenario) in self.scenarios.iter().enumerate() {
                    let cfg = SimulationConfig {
                        d,
                        gamma_conc: g,
                        n: self.n,
                        p: self.p,
                        tau: self.tau,
                        scenario,
                        alpha: self.alpha,
                        replications: self.replications,
                        methods: self.methods.clone(),
                        seed: derive_seed(self.seed, &[i as u64, j as u64, k as u64]),
                        calibration: self.calibration,
                    };
                    cfg.validate()?;
                    out.push(cfg);
                }
            }
        }
        Ok(out)
    }
}
