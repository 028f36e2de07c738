//! Run configuration: built from flags or read from a JSON file, always
//! written back fully resolved.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use qfr_core::criterion::{choose_k_kaiser, choose_k_variance_explained, choose_k_weighted_eigenvalue, KRuleNu};
use qfr_core::report::{read_matrix_csv, read_vector_file};
use qfr_core::{CriterionKind, DesignModel, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Calibrate,
    Assign,
    Diagnose,
    Infer,
    Simulate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    #[default]
    Mahalanobis,
    Euclidean,
    SquaredEuclidean,
    Ridge,
    WeightedEuclidean,
    Pca,
    Oracle,
    Custom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationChoice {
    /// Closed form when the spectrum is constant, Monte Carlo otherwise.
    #[default]
    Auto,
    MonteCarlo,
    Gamma,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InferenceChoice {
    #[default]
    Randomization,
    Asymptotic,
}

/// Criterion as written in a config: a method name and its parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionSpec {
    pub method: MethodName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Components kept by `pca`: a number, `kaiser`, `weighted_eigenvalue`
    /// or `variance:<fraction>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<PathBuf>,
}

impl CriterionSpec {
    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, what: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::SchemaViolation(format!("method {:?} needs {what}", self.method)))
            }
        };
        if self.matrix.is_some() && self.method != MethodName::Custom {
            return Err(Error::SchemaViolation("--matrix conflicts with a named --method".into()));
        }
        match self.method {
            MethodName::Ridge => need(self.lambda.is_some(), "lambda"),
            MethodName::SquaredEuclidean => need(self.exponent.is_some(), "exponent"),
            MethodName::WeightedEuclidean => need(self.weights.is_some(), "a weights file"),
            MethodName::Pca => need(self.k.is_some(), "k"),
            MethodName::Oracle => need(self.beta.is_some(), "a beta file"),
            MethodName::Custom => need(self.matrix.is_some(), "a matrix file"),
            MethodName::Mahalanobis | MethodName::Euclidean => Ok(()),
        }
    }

    /// Concrete criterion for a design; data-driven choices of k are made here.
    pub fn resolve(&self, design: &DesignModel, alpha: f64) -> Result<CriterionKind> {
        self.validate()?;
        let file =
            |p: &Option<PathBuf>| p.clone().ok_or_else(|| Error::SchemaViolation("missing criterion file".into()));
        Ok(match self.method {
            MethodName::Mahalanobis => CriterionKind::Mahalanobis,
            MethodName::Euclidean => CriterionKind::Euclidean,
            MethodName::SquaredEuclidean => {
                CriterionKind::SquaredEuclidean { exponent: self.exponent.unwrap_or_default() }
            }
            MethodName::Ridge => CriterionKind::Ridge { lambda: self.lambda.unwrap_or_default() },
            MethodName::WeightedEuclidean => {
                CriterionKind::WeightedEuclidean { weights: read_vector_file(&file(&self.weights)?)? }
            }
            MethodName::Oracle => CriterionKind::Oracle { beta: read_vector_file(&file(&self.beta)?)? },
            MethodName::Custom => CriterionKind::Custom { matrix: read_matrix_csv(&file(&self.matrix)?)? },
            MethodName::Pca => {
                let rule = self.k.as_deref().unwrap_or_default();
                let k = match rule {
                    "kaiser" => choose_k_kaiser(design),
                    "weighted_eigenvalue" => choose_k_weighted_eigenvalue(design, alpha, None, KRuleNu::Exact)?,
                    _ => match rule.strip_prefix("variance:") {
                        Some(f) => choose_k_variance_explained(
                            design,
                            f.parse().map_err(|_| Error::Parse(format!("bad variance fraction `{f}`")))?,
                        )?,
                        None => rule.parse().map_err(|_| Error::Parse(format!("bad k `{rule}`")))?,
                    },
                };
                CriterionKind::pca_mahalanobis(k)
            }
        })
    }
}

/// Everything a run depends on. Thread count is deliberately absent: it
/// never changes results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub alpha: f64,
    pub treated_fraction: f64,
    pub covariates: Option<PathBuf>,
    pub drop_zero_variance: bool,
    pub criterion: CriterionSpec,
    pub calibration: CalibrationChoice,
    pub calibration_draws: usize,
    pub nu_draws: usize,
    pub max_draws: u64,
    pub assignment: Option<PathBuf>,
    pub outcomes: Option<PathBuf>,
    pub inference: InferenceChoice,
    pub reference_draws: usize,
    pub law_draws: usize,
    pub level: f64,
    pub study: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for a command; draw counts follow `alpha`.
    pub fn new(command: Command, seed: u64, alpha: f64) -> Self {
        Self {
            command,
            seed,
            alpha,
            treated_fraction: 0.5,
            covariates: None,
            drop_zero_variance: false,
            criterion: CriterionSpec::default(),
            calibration: CalibrationChoice::Auto,
            calibration_draws: qfr_core::threshold::default_draws(alpha),
            nu_draws: default_nu_draws(alpha),
            max_draws: qfr_core::rerandomizer::default_max_draws(alpha),
            assignment: None,
            outcomes: None,
            inference: InferenceChoice::Randomization,
            reference_draws: 999,
            law_draws: 100_000,
            level: 0.95,
            study: None,
            output: None,
            report: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!("level must be in (0, 1), got {}", self.level)));
        }
        if !(self.treated_fraction > 0.0 && self.treated_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "treated fraction must be in (0, 1), got {}",
                self.treated_fraction
            )));
        }
        let missing = |name: &str| Err(Error::SchemaViolation(format!("{:?} needs {name}", self.command)));
        match self.command {
            Command::Simulate => {
                if self.study.is_none() {
                    return missing("a study file");
                }
            }
            _ => {
                if self.covariates.is_none() {
                    return missing("a covariates file");
                }
                self.criterion.validate()?;
            }
        }
        if self.command == Command::Infer && (self.assignment.is_none() || self.outcomes.is_none()) {
            return missing("assignment and outcomes files");
        }
        if self.outcomes.is_some() != self.assignment.is_some() && self.command == Command::Diagnose {
            return missing("both assignment and outcomes, or neither");
        }
        Ok(())
    }
}

/// Enough draws for about 1500 accepted ones.
pub fn default_nu_draws(alpha: f64) -> usize {
    qfr_core::threshold::default_draws(alpha).max((1500.0 / alpha).ceil() as usize)
}
