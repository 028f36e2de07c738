//! Variance-reduction factors and the quantities built from them.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::{DesignModel, SigmaGeometry};
use crate::criterion::{build_criterion, BalanceCriterion, CriterionKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{chunks, derive_seed, substream, TAG_CALIBRATE, TAG_NU, TAG_REGRET};
use crate::special::{ball_constant, chi2_quantile, truncated_chi2_factor};
use crate::threshold::{calibrate_mc, Threshold};

/// Minimum accepted draws for a Monte Carlo factor estimate.
pub const MIN_ACCEPTED: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NuMethod {
    MonteCarlo { draws: usize, accepted: usize },
    Approx,
    Exact,
}

/// Per-direction variance factors `ν_j = E[Z_j² | Σ η_i Z_i² ≤ a]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NuFactors {
    pub nu: DVector<f64>,
    /// Sampling standard error of each entry.
    pub se: DVector<f64>,
    /// Relative error common to all entries that comes from an estimated cutoff.
    pub cutoff_rel_se: f64,
    pub method: NuMethod,
    pub fingerprint: u64,
}

impl NuFactors {
    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn ones(criterion: &BalanceCriterion) -> Self {
        let d = criterion.dim();
        Self {
            nu: DVector::from_element(d, 1.0),
            se: DVector::zeros(d),
            cutoff_rel_se: 0.0,
            method: NuMethod::Exact,
            fingerprint: criterion.fingerprint(),
        }
    }

    /// Delta-method standard error of a smooth function of ν with gradient
    /// `grad`. Sampling errors are treated as independent; the cutoff error
    /// moves every active entry together.
    pub fn propagate(&self, grad: &[f64]) -> f64 {
        let sampling: f64 = grad.iter().zip(self.se.iter()).map(|(g, s)| (g * s).powi(2)).sum();
        let shared: f64 = grad
            .iter()
            .zip(self.nu.iter())
            .zip(self.se.iter())
            .filter(|(_, s)| **s > 0.0)
            .map(|((g, n), _)| g * n)
            .sum::<f64>()
            * self.cutoff_rel_se;
        (sampling + shared * shared).sqrt()
    }

    fn check(&self, criterion: &BalanceCriterion) -> Result<()> {
        if self.nu.len() != criterion.dim() {
            return Err(Error::DimensionMismatch { expected: criterion.dim(), got: self.nu.len() });
        }
        if self.fingerprint != criterion.fingerprint() {
            return Err(Error::NuCriterionMismatch);
        }
        Ok(())
    }
}

/// Conditional second moments of `Z` given `Σ η_j Z_j² ≤ a`.
#[derive(Clone, Debug)]
pub struct ConditionalMoments {
    pub nu: Vec<f64>,
    pub se: Vec<f64>,
    pub accepted: usize,
}

pub fn weighted_chisq_nu(eta: &[f64], a: f64, draws: usize, seed: u64) -> Result<ConditionalMoments> {
    let k = eta.len();
    let parts: Vec<(usize, Vec<f64>, Vec<f64>)> = chunks(draws)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = substream(seed, idx);
            let mut z2 = vec![0.0; k];
            let mut s2 = vec![0.0; k];
            let mut s4 = vec![0.0; k];
            let mut count = 0;
            for _ in 0..len {
                let mut q = 0.0;
                for (j, e) in eta.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z2[j] = z * z;
                    q += e * z2[j];
                }
                if q <= a {
                    count += 1;
                    for j in 0..k {
                        s2[j] += z2[j];
                        s4[j] += z2[j] * z2[j];
                    }
                }
            }
            (count, s2, s4)
        })
        .collect();
    let mut count = 0;
    let mut s2 = vec![0.0; k];
    let mut s4 = vec![0.0; k];
    for (c, a2, a4) in parts {
        count += c;
        for j in 0..k {
            s2[j] += a2[j];
            s4[j] += a4[j];
        }
    }
    if count < 2 {
        return Err(Error::TooFewAccepted { accepted: count, required: MIN_ACCEPTED });
    }
    let n = count as f64;
    let nu: Vec<f64> = s2.iter().map(|s| s / n).collect();
    let se = (0..k).map(|j| ((s4[j] / n - nu[j] * nu[j]).max(0.0) / (n - 1.0)).sqrt()).collect();
    Ok(ConditionalMoments { nu, se, accepted: count })
}

/// Monte Carlo factors: draws of `Z`, kept when `Σ η_j Z_j² ≤ a`.
pub fn nu_factors_mc<R: RngCore + ?Sized>(
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    draws: usize,
    rng: &mut R,
) -> Result<NuFactors> {
    nu_factors_mc_seeded(criterion, threshold, draws, rng.next_u64())
}

pub fn nu_factors_mc_seeded(
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    draws: usize,
    seed: u64,
) -> Result<NuFactors> {
    if threshold.is_unbounded() || criterion.rank() == 0 {
        return Ok(NuFactors::ones(criterion));
    }
    let r = criterion.rank();
    let m = weighted_chisq_nu(criterion.active_eta(), threshold.a, draws, derive_seed(seed, &[TAG_NU]))?;
    if m.accepted < MIN_ACCEPTED {
        return Err(Error::TooFewAccepted { accepted: m.accepted, required: MIN_ACCEPTED });
    }
    let mut out = NuFactors::ones(criterion);
    for j in 0..r {
        out.nu[j] = m.nu[j];
        out.se[j] = m.se[j];
    }
    out.cutoff_rel_se = 2.0 / r as f64 * threshold.relative_alpha_error();
    out.method = NuMethod::MonteCarlo { draws, accepted: m.accepted };
    Ok(out)
}

/// Closed-form factors for a criterion whose nonzero eigenvalues are equal.
pub fn nu_factors_exact(criterion: &BalanceCriterion, threshold: &Threshold) -> Result<NuFactors> {
    let mut out = NuFactors::ones(criterion);
    if threshold.is_unbounded() || criterion.rank() == 0 {
        return Ok(out);
    }
    let c = criterion.constant_spectrum().ok_or(Error::NotChiSquareCase)?;
    let v = truncated_chi2_factor(criterion.rank(), threshold.a / c);
    for j in 0..criterion.rank() {
        out.nu[j] = v;
    }
    Ok(out)
}

/// Small-ellipsoid approximation `ν_j ≈ p_d det^{1/d} α^{2/d} / η_j`.
pub fn nu_factors_approx(criterion: &BalanceCriterion, alpha: f64) -> Result<NuFactors> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let d = criterion.dim();
    if let Some(j) = criterion.eta().iter().position(|&e| e <= 0.0) {
        return Err(Error::ZeroEta(j));
    }
    if criterion.rank() < d {
        return Err(Error::ZeroEta(criterion.rank()));
    }
    let geo_mean = (criterion.eta().iter().map(|e| e.ln()).sum::<f64>() / d as f64).exp();
    let common = ball_constant(d) * geo_mean * alpha.powf(2.0 / d as f64);
    let mut out = NuFactors::ones(criterion);
    out.method = NuMethod::Approx;
    let mut clamped = false;
    for j in 0..d {
        let v = common / criterion.eta()[j];
        clamped |= v > 1.0;
        out.nu[j] = v.min(1.0);
    }
    if clamped {
        log::warn!("approximate variance factors exceeded 1 and were clamped (alpha = {alpha})");
    }
    Ok(out)
}

/// Cutoff and factors for a criterion: closed form when the spectrum is
/// constant, otherwise Monte Carlo calibration followed by Monte Carlo
/// factors on independent streams.
pub fn estimate_nu(
    criterion: &BalanceCriterion,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<(Threshold, NuFactors)> {
    if criterion.rank() == 0 {
        return Err(Error::DegenerateSpectrum);
    }
    if criterion.constant_spectrum().is_some() {
        let t = crate::threshold::calibrate_exact(criterion, alpha)?;
        let nu = nu_factors_exact(criterion, &t)?;
        return Ok((t, nu));
    }
    let t = calibrate_mc(criterion, alpha, draws, derive_seed(seed, &[TAG_CALIBRATE]))?;
    let nu_draws = draws.max((MIN_ACCEPTED as f64 * 1.5 / alpha).ceil() as usize);
    let nu = nu_factors_mc_seeded(criterion, &t, nu_draws, seed)?;
    Ok((t, nu))
}

/// `Σ^{1/2} Ω diag(ν) Ωᵀ Σ^{1/2}`, the covariance of `√n τ̂_X` after
/// rerandomization.
pub fn post_rerand_covariance(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    nu: &NuFactors,
) -> Result<DMatrix<f64>> {
    if criterion.dim() != geometry.dim() {
        return Err(Error::DimensionMismatch { expected: geometry.dim(), got: criterion.dim() });
    }
    nu.check(criterion)?;
    let u = geometry.sigma_sqrt() * criterion.omega();
    Ok(linalg::spectral_map(&u, &nu.nu, |v| v))
}

/// Same covariance written through the principal-component blocks of a
/// PCA-restricted criterion.
pub fn post_rerand_covariance_pca(
    geometry: &SigmaGeometry,
    criterion_k: &BalanceCriterion,
    nu_k: &NuFactors,
) -> Result<DMatrix<f64>> {
    let parts = criterion_k.pca_parts().ok_or(Error::NotPcaCriterion)?;
    if criterion_k.dim() != geometry.dim() {
        return Err(Error::DimensionMismatch { expected: geometry.dim(), got: criterion_k.dim() });
    }
    nu_k.check(criterion_k)?;
    let d = geometry.dim();
    let k = parts.k;
    let psi = DVector::from_iterator(k, nu_k.nu.iter().take(k).copied());
    let mut block = DMatrix::identity(d, d);
    block.view_mut((0, 0), (k, k)).copy_from(&linalg::spectral_map(&parts.omega_k, &psi, |v| v));
    let left = geometry.sigma_sqrt() * geometry.svd_v();
    Ok(linalg::symmetrize(&(&left * block * left.transpose())))
}

pub fn frobenius_norm(cov: &DMatrix<f64>) -> f64 {
    cov.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Frobenius norm of the post-rerandomization covariance with its
/// propagated Monte Carlo error.
pub fn frobenius_with_se(geometry: &SigmaGeometry, criterion: &BalanceCriterion, nu: &NuFactors) -> Result<(f64, f64)> {
    let cov = post_rerand_covariance(geometry, criterion, nu)?;
    let f = frobenius_norm(&cov);
    let u = geometry.sigma_sqrt() * criterion.omega();
    let grad: Vec<f64> =
        u.column_iter().map(|c| (c.transpose() * &cov * c)[(0, 0)] / f.max(f64::MIN_POSITIVE)).collect();
    Ok((f, nu.propagate(&grad)))
}

/// `Σ_j (1 − ν_j)`.
pub fn total_variance_reduction(nu: &NuFactors) -> f64 {
    nu.nu.iter().map(|v| 1.0 - v).sum()
}

pub fn total_variance_reduction_se(nu: &NuFactors) -> f64 {
    nu.propagate(&vec![-1.0; nu.len()])
}

/// Projection coefficients linking covariates to outcomes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutcomeModel {
    beta: Option<DVector<f64>>,
    beta_z: Option<DVector<f64>>,
    r_squared: f64,
    v_tautau: f64,
}

impl OutcomeModel {
    fn validate(r_squared: f64, v_tautau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&r_squared) {
            return Err(Error::InvalidParameter(format!("R² must be in [0, 1], got {r_squared}")));
        }
        if !(v_tautau > 0.0 && v_tautau.is_finite()) {
            return Err(Error::InvalidParameter(format!("V_tautau must be positive, got {v_tautau}")));
        }
        Ok(())
    }

    /// From covariate-space coefficients; the principal-axis version is
    /// derived.
    pub fn new(beta: DVector<f64>, r_squared: f64, v_tautau: f64, geometry: &SigmaGeometry) -> Result<Self> {
        Self::validate(r_squared, v_tautau)?;
        if beta.len() != geometry.dim() {
            return Err(Error::DimensionMismatch { expected: geometry.dim(), got: beta.len() });
        }
        let beta_z = geometry.svd_v().transpose() * &beta;
        Ok(Self { beta: Some(beta), beta_z: Some(beta_z), r_squared, v_tautau })
    }

    pub fn from_beta_z(beta_z: DVector<f64>, r_squared: f64, v_tautau: f64, geometry: &SigmaGeometry) -> Result<Self> {
        Self::validate(r_squared, v_tautau)?;
        if beta_z.len() != geometry.dim() {
            return Err(Error::DimensionMismatch { expected: geometry.dim(), got: beta_z.len() });
        }
        let beta = geometry.svd_v() * &beta_z;
        Ok(Self { beta: Some(beta), beta_z: Some(beta_z), r_squared, v_tautau })
    }

    /// Only the residual part is known.
    pub fn without_beta(r_squared: f64, v_tautau: f64) -> Result<Self> {
        Self::validate(r_squared, v_tautau)?;
        Ok(Self { beta: None, beta_z: None, r_squared, v_tautau })
    }

    /// Finite-population quantities from both potential outcomes.
    pub fn from_potential_outcomes(design: &DesignModel, y0: &[f64], y1: &[f64]) -> Result<Self> {
        let n = design.n();
        for y in [y0, y1] {
            if y.len() != n {
                return Err(Error::LengthMismatch { expected: n, got: y.len() });
            }
        }
        let p = design.p();
        let x = design.x_std();
        let nf = n as f64;
        let centered = |y: &[f64]| {
            let m = y.iter().sum::<f64>() / nf;
            DVector::from_iterator(n, y.iter().map(|v| v - m))
        };
        let c1 = centered(y1);
        let c0 = centered(y0);
        let tau = &c1 - &c0;
        let s1 = c1.norm_squared() / (nf - 1.0);
        let s0 = c0.norm_squared() / (nf - 1.0);
        let st = tau.norm_squared() / (nf - 1.0);
        let v_tautau = s1 / p + s0 / (1.0 - p) - st;
        let v_xtau = (x.transpose() * &c1) / ((nf - 1.0) * p) + (x.transpose() * &c0) / ((nf - 1.0) * (1.0 - p));
        let sigma_pinv = linalg::spectral_map(design.gamma(), design.lambda(), |l| {
            if l > linalg::RANK_TOL * design.lambda()[0] {
                1.0 / l
            } else {
                0.0
            }
        });
        let beta = &sigma_pinv * &v_xtau;
        if v_tautau.is_nan() || v_tautau <= 0.0 {
            return Err(Error::DegenerateOutcomes);
        }
        let r2 = (v_xtau.dot(&beta) / v_tautau).clamp(0.0, 1.0);
        Self::new(beta, r2, v_tautau, design.geometry())
    }

    pub fn beta(&self) -> Option<&DVector<f64>> {
        self.beta.as_ref()
    }

    pub fn beta_z(&self) -> Option<&DVector<f64>> {
        self.beta_z.as_ref()
    }

    pub fn r_squared(&self) -> f64 {
        self.r_squared
    }

    pub fn v_tautau(&self) -> f64 {
        self.v_tautau
    }

    /// Variance not explained by the covariates, `V_ττ (1 − R²)`.
    pub fn residual_variance(&self) -> f64 {
        self.v_tautau * (1.0 - self.r_squared)
    }
}

/// Asymptotic variance of `√n (τ̂ − τ)` under the criterion.
pub fn variance_of_tauhat(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    nu: &NuFactors,
    outcome: &OutcomeModel,
) -> Result<f64> {
    let beta = outcome.beta().ok_or(Error::MissingOutcomeModel)?;
    if beta.len() != geometry.dim() {
        return Err(Error::DimensionMismatch { expected: geometry.dim(), got: beta.len() });
    }
    let cov = post_rerand_covariance(geometry, criterion, nu)?;
    Ok(beta.dot(&(&cov * beta)) + outcome.residual_variance())
}

/// Loadings of `β` on the criterion directions, `Ωᵀ V Λ^{1/2} β_Z`.
fn direction_loadings(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    beta_z: &DVector<f64>,
) -> Result<DVector<f64>> {
    if beta_z.len() != geometry.dim() || criterion.dim() != geometry.dim() {
        return Err(Error::DimensionMismatch { expected: geometry.dim(), got: beta_z.len() });
    }
    let scaled = beta_z.component_mul(&geometry.lambda().map(f64::sqrt));
    Ok(criterion.omega().transpose() * geometry.svd_v() * scaled)
}

/// Variance removed by the criterion relative to complete randomization.
pub fn delta_variance(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    nu: &NuFactors,
    beta_z: &DVector<f64>,
) -> Result<f64> {
    nu.check(criterion)?;
    let load = direction_loadings(geometry, criterion, beta_z)?;
    Ok(load.iter().zip(nu.nu.iter()).map(|(l, v)| l * l * (1.0 - v)).sum())
}

/// Propagated Monte Carlo error of `delta_variance`.
pub fn delta_variance_se(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    nu: &NuFactors,
    beta_z: &DVector<f64>,
) -> Result<f64> {
    let load = direction_loadings(geometry, criterion, beta_z)?;
    let grad: Vec<f64> = load.iter().map(|l| -l * l).collect();
    Ok(nu.propagate(&grad))
}

/// When `Ωᵀ V` is a signed permutation, the criterion direction matched to
/// each principal axis.
pub fn shared_basis_permutation(geometry: &SigmaGeometry, criterion: &BalanceCriterion) -> Option<Vec<usize>> {
    let m = criterion.omega().transpose() * geometry.svd_v();
    let d = m.nrows();
    let mut perm = vec![usize::MAX; d];
    for axis in 0..d {
        let col = m.column(axis);
        let (best, val) = col.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))?;
        if (val.abs() - 1.0).abs() > 1e-6 || perm.contains(&best) {
            return None;
        }
        perm[axis] = best;
    }
    Some(perm)
}

/// `Σ_j β²_{Z,j} λ_j (1 − ν_j)` with ν matched to principal axes; only
/// valid when the criterion shares the eigenbasis of Σ.
pub fn delta_variance_shared(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    nu: &NuFactors,
    beta_z: &DVector<f64>,
) -> Option<f64> {
    let perm = shared_basis_permutation(geometry, criterion)?;
    Some((0..geometry.dim()).map(|j| beta_z[j].powi(2) * geometry.lambda()[j] * (1.0 - nu.nu[perm[j]])).sum())
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleGain {
    /// Largest eigenvalue `βᵀ Σ β` of the rank-one criterion.
    pub eta1: f64,
    pub nu_star: f64,
    pub nu_se: f64,
    pub percent_reduction: f64,
}

/// How the oracle factor is computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OracleNu {
    Exact,
    MonteCarlo { draws: usize },
}

/// Gain of the rank-one criterion `ββᵀ`.
pub fn oracle_gain<R: RngCore + ?Sized>(
    geometry: &SigmaGeometry,
    outcome: &OutcomeModel,
    alpha: f64,
    method: OracleNu,
    rng: &mut R,
) -> Result<OracleGain> {
    let beta = outcome.beta().ok_or(Error::MissingOutcomeModel)?;
    let crit = build_criterion(&CriterionKind::Oracle { beta: beta.iter().copied().collect() }, geometry)?;
    let eta1 = crit.eta()[0];
    let (nu_star, nu_se) = match method {
        OracleNu::Exact => {
            let t = crate::threshold::calibrate_exact(&crit, alpha)?;
            let nu = nu_factors_exact(&crit, &t)?;
            (nu.nu[0], 0.0)
        }
        OracleNu::MonteCarlo { draws } => {
            let t = crate::threshold::calibrate_exact(&crit, alpha)?;
            let nu = nu_factors_mc(&crit, &t, draws, rng)?;
            (nu.nu[0], nu.se[0])
        }
    };
    Ok(OracleGain { eta1, nu_star, nu_se, percent_reduction: 100.0 * (1.0 - nu_star) * outcome.r_squared() })
}

/// Exact oracle factor `ν*`, which does not depend on `β`.
pub fn oracle_nu(alpha: f64) -> f64 {
    truncated_chi2_factor(1, chi2_quantile(1.0, alpha))
}

#[derive(Clone, Debug, Serialize)]
pub struct Regret {
    pub value: f64,
    pub se: f64,
    pub argmax_beta_z: Vec<f64>,
    pub grid_size: usize,
}

/// Directions on the sphere `‖β_Z‖ = radius`: the coordinate vertices plus
/// a grid of normalized integer vectors, or random directions when that
/// grid would be too large.
pub fn regret_grid<R: RngCore + ?Sized>(d: usize, radius: f64, resolution: usize, rng: &mut R) -> Vec<DVector<f64>> {
    const MAX_GRID: usize = 4096;
    let mut out: Vec<DVector<f64>> =
        (0..d).map(|k| DVector::from_fn(d, |i, _| if i == k { radius } else { 0.0 })).collect();
    if resolution == 0 {
        return out;
    }
    let side = 2 * resolution + 1;
    let full = (side as f64).powi(d as i32);
    if full <= MAX_GRID as f64 {
        let r = resolution as i64;
        for code in 0..side.pow(d as u32) {
            let mut c = code;
            let v = DVector::from_fn(d, |_, _| {
                let digit = (c % side) as i64 - r;
                c /= side;
                digit as f64
            });
            let norm = v.norm();
            // skip the origin and keep one of each ± pair
            let first = v.iter().find(|x| **x != 0.0).copied();
            if norm > 0.0 && first.is_some_and(|f| f > 0.0) {
                out.push(v * (radius / norm));
            }
        }
    } else {
        let mut g = substream(derive_seed(rng.next_u64(), &[TAG_REGRET]), 0);
        for _ in 0..MAX_GRID {
            let v = DVector::from_fn(d, |_, _| -> f64 { StandardNormal.sample(&mut g) });
            let norm = v.norm();
            if norm > 0.0 {
                out.push(v * (radius / norm));
            }
        }
    }
    out
}

/// Largest gap, over the grid, between the variance of `τ̂` under the
/// criterion and under the oracle for that `β`. The residual variance is
/// common to both and cancels.
pub fn worst_case_regret(
    geometry: &SigmaGeometry,
    criterion: &BalanceCriterion,
    nu: &NuFactors,
    alpha: f64,
    grid: &[DVector<f64>],
) -> Result<Regret> {
    nu.check(criterion)?;
    let nu_star = oracle_nu(alpha);
    let lam = geometry.lambda();
    let mut best = Regret { value: f64::NEG_INFINITY, se: 0.0, argmax_beta_z: Vec::new(), grid_size: grid.len() };
    for bz in grid {
        let load = direction_loadings(geometry, criterion, bz)?;
        let v_crit: f64 = load.iter().zip(nu.nu.iter()).map(|(l, v)| l * l * v).sum();
        let signal: f64 = bz.iter().zip(lam.iter()).map(|(b, l)| b * b * l).sum();
        let gap = (v_crit - signal * nu_star).abs();
        if gap > best.value {
            let grad: Vec<f64> = load.iter().map(|l| l * l).collect();
            best = Regret {
                value: gap,
                se: nu.propagate(&grad),
                argmax_beta_z: bz.iter().copied().collect(),
                grid_size: grid.len(),
            };
        }
    }
    if grid.is_empty() {
        best.value = 0.0;
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct DropDecision {
    /// True when restricting to the rank-k criterion lowers the variance.
    pub drop: bool,
    /// Extra reduction on the kept directions.
    pub gain: f64,
    /// Reduction given up on the dropped directions.
    pub loss: f64,
    pub shared_basis: bool,
}

/// Compares the full criterion with its rank-k restriction.
pub fn drop_decision(
    geometry: &SigmaGeometry,
    criterion_d: &BalanceCriterion,
    criterion_k: &BalanceCriterion,
    beta_z: &DVector<f64>,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<DropDecision> {
    if beta_z.len() != geometry.dim() {
        return Err(Error::DimensionMismatch { expected: geometry.dim(), got: beta_z.len() });
    }
    let (_, nu_d) = estimate_nu(criterion_d, alpha, draws, derive_seed(seed, &[1]))?;
    let (_, nu_k) = estimate_nu(criterion_k, alpha, draws, derive_seed(seed, &[2]))?;
    drop_decision_with(geometry, criterion_d, &nu_d, criterion_k, &nu_k, beta_z)
}

pub fn drop_decision_with(
    geometry: &SigmaGeometry,
    criterion_d: &BalanceCriterion,
    nu_d: &NuFactors,
    criterion_k: &BalanceCriterion,
    nu_k: &NuFactors,
    beta_z: &DVector<f64>,
) -> Result<DropDecision> {
    let perm = shared_basis_permutation(geometry, criterion_d).zip(shared_basis_permutation(geometry, criterion_k));
    if let Some((pd, pk)) = perm {
        let lam = geometry.lambda();
        let (mut gain, mut loss) = (0.0, 0.0);
        for j in 0..geometry.dim() {
            let w = beta_z[j].powi(2) * lam[j];
            let vd = nu_d.nu[pd[j]];
            let vk = nu_k.nu[pk[j]];
            if vk < 1.0 {
                gain += w * (vd - vk);
            } else {
                loss += w * (1.0 - vd);
            }
        }
        return Ok(DropDecision { drop: gain >= loss, gain, loss, shared_basis: true });
    }
    let dd = delta_variance(geometry, criterion_d, nu_d, beta_z)?;
    let dk = delta_variance(geometry, criterion_k, nu_k, beta_z)?;
    let (gain, loss) = if dk >= dd { (dk - dd, 0.0) } else { (0.0, dd - dk) };
    Ok(DropDecision { drop: dk >= dd, gain, loss, shared_basis: false })
}

/// `|det(C − ν_j Σ)| / det(Σ)` for each factor; zero when the factors are
/// the generalized eigenvalues of `(C, Σ)`.
pub fn generalized_eigen_residual(geometry: &SigmaGeometry, cov: &DMatrix<f64>, nu: &NuFactors) -> Result<Vec<f64>> {
    if !geometry.is_full_rank() {
        return Err(Error::SingularSigma { min: geometry.lambda()[geometry.dim() - 1], max: geometry.lambda()[0] });
    }
    if cov.nrows() != geometry.dim() || nu.len() != geometry.dim() {
        return Err(Error::DimensionMismatch { expected: geometry.dim(), got: nu.len() });
    }
    let det_sigma = geometry.lambda().iter().product::<f64>();
    Ok(nu.nu.iter().map(|&v| ((cov - geometry.sigma() * v).determinant() / det_sigma).abs()).collect())
}
