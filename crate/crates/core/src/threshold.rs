//! Acceptance cutoffs for a target acceptance probability.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::BalanceCriterion;
use crate::error::{Error, Result};
use crate::rng::{chunks, derive_seed, substream, TAG_CALIBRATE, TAG_HOLDOUT};
use crate::special::{chi2_quantile, gamma_cdf, gamma_quantile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CalibrationMethod {
    MonteCarlo { draws: usize, seed: u64 },
    GammaApprox { shape: f64, scale: f64 },
    ExactChiSq { df: usize, scale: f64 },
    Unbounded,
}

impl CalibrationMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CalibrationMethod::MonteCarlo { .. } => "mc",
            CalibrationMethod::GammaApprox { .. } => "gamma",
            CalibrationMethod::ExactChiSq { .. } => "exact",
            CalibrationMethod::Unbounded => "unbounded",
        }
    }
}

/// Cutoff `a` for `Q ≤ a`, with the acceptance probability it targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub a: f64,
    pub alpha_target: f64,
    pub method: CalibrationMethod,
    /// Acceptance probability estimated on independent draws (Monte Carlo)
    /// or implied by the law used (analytic routes).
    pub alpha_achieved: f64,
    pub alpha_se: f64,
}

impl Threshold {
    /// Accepts every assignment.
    pub fn unbounded() -> Self {
        Self {
            a: f64::INFINITY,
            alpha_target: 1.0,
            method: CalibrationMethod::Unbounded,
            alpha_achieved: 1.0,
            alpha_se: 0.0,
        }
    }

    pub fn accepts(&self, q: f64) -> bool {
        q <= self.a
    }

    pub fn is_unbounded(&self) -> bool {
        self.a.is_infinite()
    }

    /// Relative standard error of the achieved acceptance probability that
    /// comes from estimating the cutoff itself.
    pub fn relative_alpha_error(&self) -> f64 {
        match self.method {
            CalibrationMethod::MonteCarlo { draws, .. } => {
                let al = self.alpha_target;
                ((1.0 - al) / (al * draws as f64)).sqrt()
            }
            _ => 0.0,
        }
    }
}

/// `max(200000, ceil(50/α))`.
pub fn default_draws(alpha: f64) -> usize {
    200_000usize.max((50.0 / alpha).ceil() as usize)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha must be in (0, 1), got {alpha}")))
    }
}

/// Draws of `Σ η_j Z_j²`, chunked on fixed substreams.
pub fn sample_weighted_chisq(eta: &[f64], draws: usize, seed: u64) -> Vec<f64> {
    let parts: Vec<Vec<f64>> = chunks(draws)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = substream(seed, idx);
            (0..len)
                .map(|_| {
                    eta.iter()
                        .map(|e| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            e * z * z
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    parts.concat()
}

/// Linear-interpolation sample quantile (type 7). Reorders `values`.
pub fn empirical_quantile(values: &mut [f64], prob: f64) -> f64 {
    assert!(!values.is_empty());
    let h = (values.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let len = values.len();
    let (_, &mut x_lo, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if lo + 1 >= len || h == lo as f64 {
        return x_lo;
    }
    let x_hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    x_lo + (h - lo as f64) * (x_hi - x_lo)
}

/// Cutoff as the empirical α-quantile of simulated `Σ η_j Z_j²`, with the
/// achieved acceptance rate checked on an independent holdout.
pub fn calibrate_mc(criterion: &BalanceCriterion, alpha: f64, draws: usize, seed: u64) -> Result<Threshold> {
    check_alpha(alpha)?;
    let min = (10.0 / alpha).ceil() as usize;
    if draws < min {
        return Err(Error::TooFewDraws { draws, alpha, min });
    }
    let eta = criterion.active_eta();
    if eta.is_empty() {
        return Err(Error::DegenerateSpectrum);
    }
    let mut sample = sample_weighted_chisq(eta, draws, derive_seed(seed, &[TAG_CALIBRATE]));
    let a = empirical_quantile(&mut sample, alpha);
    drop(sample);
    let holdout = (draws / 4).max(min);
    let hold = sample_weighted_chisq(eta, holdout, derive_seed(seed, &[TAG_HOLDOUT]));
    let hit = hold.iter().filter(|&&q| q <= a).count() as f64 / holdout as f64;
    Ok(Threshold {
        a,
        alpha_target: alpha,
        method: CalibrationMethod::MonteCarlo { draws, seed },
        alpha_achieved: hit,
        alpha_se: (hit * (1.0 - hit) / holdout as f64).sqrt(),
    })
}

/// Gamma law with the first two moments of `Σ η_j Z_j²`.
pub fn calibrate_gamma(criterion: &BalanceCriterion, alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    let eta = criterion.active_eta();
    let s1: f64 = eta.iter().sum();
    let s2: f64 = eta.iter().map(|e| e * e).sum();
    if s1 <= 0.0 {
        return Err(Error::DegenerateSpectrum);
    }
    let shape = s1 * s1 / (2.0 * s2);
    let scale = 2.0 * s2 / s1;
    let a = gamma_quantile(shape, scale, alpha);
    Ok(Threshold {
        a,
        alpha_target: alpha,
        method: CalibrationMethod::GammaApprox { shape, scale },
        alpha_achieved: gamma_cdf(shape, scale, a),
        alpha_se: 0.0,
    })
}

/// χ²_d quantile, the exact cutoff for Mahalanobis on `d` directions.
pub fn calibrate_exact_chisq(d: usize, alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    if d == 0 {
        return Err(Error::InvalidParameter("degrees of freedom must be positive".into()));
    }
    exact_scaled(d, 1.0, alpha)
}

fn exact_scaled(df: usize, scale: f64, alpha: f64) -> Result<Threshold> {
    let a = scale * chi2_quantile(df as f64, alpha);
    Ok(Threshold {
        a,
        alpha_target: alpha,
        method: CalibrationMethod::ExactChiSq { df, scale },
        alpha_achieved: alpha,
        alpha_se: 0.0,
    })
}

/// Exact cutoff for any criterion whose nonzero eigenvalues share one value
/// (Mahalanobis, PCA-restricted Mahalanobis, oracle, scaled versions).
pub fn calibrate_exact(criterion: &BalanceCriterion, alpha: f64) -> Result<Threshold> {
    check_alpha(alpha)?;
    if criterion.rank() == 0 {
        return Err(Error::DegenerateSpectrum);
    }
    let c = criterion.constant_spectrum().ok_or(Error::NotChiSquareCase)?;
    exact_scaled(criterion.rank(), c, alpha)
}

/// Exact route when it applies, Monte Carlo otherwise.
pub fn calibrate_auto(criterion: &BalanceCriterion, alpha: f64, draws: usize, seed: u64) -> Result<Threshold> {
    match calibrate_exact(criterion, alpha) {
        Err(Error::NotChiSquareCase) => calibrate_mc(criterion, alpha, draws, seed),
        other => other,
    }
}
