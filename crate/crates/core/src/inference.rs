//! Difference-in-means estimation, randomization tests and intervals.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::DesignModel;
use crate::criterion::BalanceCriterion;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rerandomizer::{batch_accepted, Assignment};
use crate::rng::{chunks, derive_seed, substream, TAG_ASYMPTOTIC};
use crate::threshold::{empirical_quantile, Threshold};

/// Minimum accepted draws behind an asymptotic interval.
const MIN_ACCEPTED_LAW: usize = 200;
/// Grid steps searched on each side before giving up on a bracket.
const MAX_GRID_STEPS: usize = 200;

pub fn diff_in_means(w: &Assignment, y: &[f64]) -> Result<f64> {
    if y.len() != w.n() {
        return Err(Error::LengthMismatch { expected: w.n(), got: y.len() });
    }
    if w.n1() == 0 || w.n0() == 0 {
        return Err(Error::BadCounts { n: w.n(), n1: w.n1() });
    }
    let (mut t, mut c) = (0.0, 0.0);
    for (&wi, &yi) in w.w().iter().zip(y) {
        if wi == 1 {
            t += yi;
        } else {
            c += yi;
        }
    }
    Ok(t / w.n1() as f64 - c / w.n0() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InferenceMethod {
    Randomization { m: usize, seed: u64 },
    Asymptotic { draws: usize, seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceResult {
    pub tau_hat: f64,
    /// Two-sided p-value for a zero additive effect.
    pub p_value: f64,
    pub ci: ConfidenceInterval,
    pub method: InferenceMethod,
    /// True when the interval is conservative by construction.
    pub conservative: bool,
    pub notes: Vec<String>,
}

/// Accepted assignments used as the reference distribution.
#[derive(Clone, Debug)]
pub struct ReferenceBatch {
    assignments: Vec<Assignment>,
}

impl ReferenceBatch {
    pub fn draw<R: RngCore + ?Sized>(
        design: &DesignModel,
        criterion: &BalanceCriterion,
        threshold: &Threshold,
        m: usize,
        rng: &mut R,
        max_draws: u64,
    ) -> Result<Self> {
        let batch = batch_accepted(design, criterion, threshold, m, rng, max_draws)?;
        Ok(Self { assignments: batch.into_iter().map(|r| r.assignment).collect() })
    }

    pub fn from_assignments(assignments: Vec<Assignment>) -> Self {
        Self { assignments }
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Precomputes what the statistic needs for every hypothesized effect.
    pub fn statistics(&self, w_obs: &Assignment, y_obs: &[f64]) -> Result<ReferenceStats> {
        let tau_hat = diff_in_means(w_obs, y_obs)?;
        let w_f: Vec<f64> = w_obs.w().iter().map(|&v| v as f64).collect();
        let pairs: Vec<(f64, f64)> = self
            .assignments
            .par_iter()
            .map(|w| Ok((diff_in_means(w, y_obs)?, diff_in_means(w, &w_f)?)))
            .collect::<Result<_>>()?;
        let (y_diff, w_diff) = pairs.into_iter().unzip();
        Ok(ReferenceStats { tau_hat, y_diff, w_diff })
    }
}

/// Difference in means of the observed outcomes and of the observed
/// assignment under each reference assignment.
#[derive(Clone, Debug)]
pub struct ReferenceStats {
    tau_hat: f64,
    y_diff: Vec<f64>,
    w_diff: Vec<f64>,
}

impl ReferenceStats {
    pub fn tau_hat(&self) -> f64 {
        self.tau_hat
    }

    /// Two-sided p-value for `Y(1) = Y(0) + tau0`. The statistic is the
    /// difference in means of `y − tau0·w_obs`; ties count as exceedances.
    pub fn p_value(&self, tau0: f64) -> f64 {
        let obs = (self.tau_hat - tau0).abs();
        let cut = obs * (1.0 - 1e-12) - 1e-14 * (1.0 + self.tau_hat.abs() + tau0.abs());
        let hits = self.y_diff.iter().zip(&self.w_diff).filter(|(d, e)| (*d - tau0 * *e).abs() >= cut).count();
        (1 + hits) as f64 / (self.y_diff.len() + 1) as f64
    }
}

#[allow(clippy::too_many_arguments)]
pub fn randomization_test<R: RngCore + ?Sized>(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    w_obs: &Assignment,
    y_obs: &[f64],
    tau0: f64,
    m: usize,
    rng: &mut R,
    max_draws: u64,
) -> Result<f64> {
    let batch = ReferenceBatch::draw(design, criterion, threshold, m, rng, max_draws)?;
    Ok(batch.statistics(w_obs, y_obs)?.p_value(tau0))
}

/// Neyman standard error of the difference in means.
pub fn neyman_se(w: &Assignment, y: &[f64]) -> Result<f64> {
    let (v1, v0) = arm_variances(w, y)?;
    Ok((v1 / w.n1() as f64 + v0 / w.n0() as f64).sqrt())
}

fn arm_variances(w: &Assignment, y: &[f64]) -> Result<(f64, f64)> {
    if y.len() != w.n() {
        return Err(Error::LengthMismatch { expected: w.n(), got: y.len() });
    }
    let var = |arm: u8| {
        let vals: Vec<f64> = w.w().iter().zip(y).filter(|(wi, _)| **wi == arm).map(|(_, v)| *v).collect();
        let k = vals.len() as f64;
        if k < 2.0 {
            return 0.0;
        }
        let m = vals.iter().sum::<f64>() / k;
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)
    };
    Ok((var(1), var(0)))
}

/// Set of effects not rejected at `1 − level`, found by a grid walk out of
/// `τ̂` followed by bisection on each side.
pub fn invert_p_values(stats: &ReferenceStats, level: f64, step: f64) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must be in (0, 1), got {level}")));
    }
    let reject_at = 1.0 - level;
    let accepts = |t: f64| stats.p_value(t) > reject_at;
    let centre = stats.tau_hat();
    let edge = |dir: f64| -> Result<f64> {
        let mut inside = centre;
        for k in 1..=MAX_GRID_STEPS {
            let probe = centre + dir * step * k as f64;
            if !accepts(probe) {
                let (mut a, mut b) = (inside, probe);
                for _ in 0..100 {
                    let mid = 0.5 * (a + b);
                    if accepts(mid) {
                        a = mid;
                    } else {
                        b = mid;
                    }
                    if (b - a).abs() <= 1e-10 * step {
                        break;
                    }
                }
                return Ok(a);
            }
            inside = probe;
        }
        Err(Error::BracketNotFound(MAX_GRID_STEPS))
    };
    let hi = edge(1.0)?;
    let lo = edge(-1.0)?;
    Ok(ConfidenceInterval { lo, hi, level })
}

/// Interval by inverting the randomization test over additive effects,
/// with one accepted batch shared by every hypothesized effect.
#[allow(clippy::too_many_arguments)]
pub fn randomization_ci<R: RngCore + ?Sized>(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    w_obs: &Assignment,
    y_obs: &[f64],
    level: f64,
    m: usize,
    rng: &mut R,
    max_draws: u64,
) -> Result<ConfidenceInterval> {
    Ok(randomization_inference(design, criterion, threshold, w_obs, y_obs, level, m, rng.next_u64(), max_draws)?.ci)
}

/// Test of a zero effect and the inverted interval from one batch.
#[allow(clippy::too_many_arguments)]
pub fn randomization_inference(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    w_obs: &Assignment,
    y_obs: &[f64],
    level: f64,
    m: usize,
    seed: u64,
    max_draws: u64,
) -> Result<InferenceResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must be in (0, 1), got {level}")));
    }
    let mut rng = <crate::rng::StreamRng as rand::SeedableRng>::seed_from_u64(seed);
    let batch = ReferenceBatch::draw(design, criterion, threshold, m, &mut rng, max_draws)?;
    let stats = batch.statistics(w_obs, y_obs)?;
    let se = neyman_se(w_obs, y_obs)?;
    let step = if se > 0.0 { se } else { 1e-8 * (1.0 + stats.tau_hat().abs()) };
    let ci = invert_p_values(&stats, level, step)?;
    Ok(InferenceResult {
        tau_hat: stats.tau_hat(),
        p_value: stats.p_value(0.0),
        ci,
        method: InferenceMethod::Randomization { m, seed },
        conservative: false,
        notes: vec!["p-values count ties as exceedances".into()],
    })
}

/// Plug-in pieces of the asymptotic law.
#[derive(Clone, Debug, Serialize)]
pub struct PlugIn {
    pub beta: DVector<f64>,
    pub v_tautau: f64,
    pub r_squared: f64,
}

/// Within-arm projections pooled as `β̂ = (1−p) b₁ + p b₀`, which is
/// `Σ⁻¹ V̂_xτ` with `Ŝ_{Y(w),X} = S_X b_w`.
pub fn plug_in(design: &DesignModel, w_obs: &Assignment, y_obs: &[f64], effect_variance: f64) -> Result<PlugIn> {
    if y_obs.len() != design.n() || w_obs.n() != design.n() {
        return Err(Error::LengthMismatch { expected: design.n(), got: y_obs.len() });
    }
    let (s1, s0) = arm_variances(w_obs, y_obs)?;
    if s1 <= 0.0 && s0 <= 0.0 {
        return Err(Error::DegenerateOutcomes);
    }
    let p = design.p();
    let d = design.d();
    let coef = |arm: u8| -> DVector<f64> {
        let idx: Vec<usize> = (0..design.n()).filter(|&i| w_obs.w()[i] == arm).collect();
        let k = idx.len() as f64;
        let mut xm = DVector::zeros(d);
        let mut ym = 0.0;
        for &i in &idx {
            xm += DVector::from_column_slice(design.row(i));
            ym += y_obs[i];
        }
        xm /= k;
        ym /= k;
        let mut gram = DMatrix::zeros(d, d);
        let mut cross = DVector::zeros(d);
        for &i in &idx {
            let xc = DVector::from_column_slice(design.row(i)) - &xm;
            gram += &xc * xc.transpose();
            cross += &xc * (y_obs[i] - ym);
        }
        linalg::solve_with_ridge(&gram, &cross, 1e-8)
    };
    let beta = coef(1) * (1.0 - p) + coef(0) * p;
    let v_tautau = s1 / p + s0 / (1.0 - p) - effect_variance;
    let signal = beta.dot(&(design.sigma() * &beta));
    let r_squared = if v_tautau > 0.0 { (signal / v_tautau).clamp(0.0, 1.0) } else { 1.0 };
    Ok(PlugIn { beta, v_tautau, r_squared })
}

/// Accepted draws of `ε + βᵀξ` given `ξᵀAξ ≤ a`, written in the
/// criterion's eigenbasis.
fn limit_law(
    criterion: &BalanceCriterion,
    design: &DesignModel,
    plug: &PlugIn,
    threshold: &Threshold,
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    let load = criterion.omega().transpose() * design.sigma_sqrt() * &plug.beta;
    let eta = criterion.eta().clone();
    let resid_sd = (plug.v_tautau * (1.0 - plug.r_squared)).max(0.0).sqrt();
    let a = threshold.a;
    let parts: Vec<Vec<f64>> = chunks(draws)
        .into_par_iter()
        .map(|(idx, len)| {
            let mut rng = substream(seed, idx);
            let mut out = Vec::new();
            for _ in 0..len {
                let mut q = 0.0;
                let mut t = 0.0;
                for j in 0..eta.len() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    q += eta[j] * z * z;
                    t += load[j] * z;
                }
                let e: f64 = StandardNormal.sample(&mut rng);
                if q <= a {
                    out.push(t + resid_sd * e);
                }
            }
            out
        })
        .collect();
    parts.concat()
}

#[allow(clippy::too_many_arguments)]
pub fn asymptotic_ci<R: RngCore + ?Sized>(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    w_obs: &Assignment,
    y_obs: &[f64],
    level: f64,
    draws: usize,
    rng: &mut R,
) -> Result<ConfidenceInterval> {
    Ok(asymptotic_inference(design, criterion, threshold, w_obs, y_obs, level, draws, rng.next_u64(), 0.0)?.ci)
}

/// Interval from the conditional limit law with plug-in estimates. The
/// variance of individual effects is not identified; `effect_variance`
/// is subtracted from the plug-in `V_ττ` and is zero in normal use.
#[allow(clippy::too_many_arguments)]
pub fn asymptotic_inference(
    design: &DesignModel,
    criterion: &BalanceCriterion,
    threshold: &Threshold,
    w_obs: &Assignment,
    y_obs: &[f64],
    level: f64,
    draws: usize,
    seed: u64,
    effect_variance: f64,
) -> Result<InferenceResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must be in (0, 1), got {level}")));
    }
    if w_obs.n1() != design.n1() {
        return Err(Error::GroupCountMismatch { expected: design.n1(), got: w_obs.n1() });
    }
    let tau_hat = diff_in_means(w_obs, y_obs)?;
    let plug = plug_in(design, w_obs, y_obs, effect_variance)?;
    let mut law = limit_law(criterion, design, &plug, threshold, draws, derive_seed(seed, &[TAG_ASYMPTOTIC]));
    if law.len() < MIN_ACCEPTED_LAW {
        return Err(Error::TooFewAccepted { accepted: law.len(), required: MIN_ACCEPTED_LAW });
    }
    let root_n = (design.n() as f64).sqrt();
    let tail = 0.5 * (1.0 - level);
    let q_lo = empirical_quantile(&mut law, tail);
    let q_hi = empirical_quantile(&mut law, 1.0 - tail);
    let obs = root_n * tau_hat.abs();
    let exceed = law.iter().filter(|t| t.abs() >= obs).count();
    Ok(InferenceResult {
        tau_hat,
        p_value: (1 + exceed) as f64 / (law.len() + 1) as f64,
        ci: ConfidenceInterval { lo: tau_hat - q_hi / root_n, hi: tau_hat - q_lo / root_n, level },
        method: InferenceMethod::Asymptotic { draws, seed },
        conservative: effect_variance == 0.0,
        notes: vec![format!(
            "plug-in R² = {:.6}, V_tautau = {:.6}; variance of individual effects taken as {effect_variance}",
            plug.r_squared, plug.v_tautau
        )],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariate::{standardize, CovariateMatrix};
    use crate::criterion::{build_criterion, CriterionKind};
    use crate::rerandomizer::complete_randomization;
    use crate::threshold::calibrate_exact_chisq;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn design(n: usize, d: usize, seed: u64) -> DesignModel {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(n, d, |_, _| -> f64 { StandardNormal.sample(&mut r) });
        standardize(&CovariateMatrix::from_values(m).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn diff_in_means_cases() {
        let w = Assignment::new(vec![1, 1, 0, 0]).unwrap();
        assert_eq!(diff_in_means(&w, &[1.0, 2.0, 3.0, 4.0]).unwrap(), -2.0);
        assert_eq!(diff_in_means(&w, &[5.0; 4]).unwrap(), 0.0);
        assert!(matches!(diff_in_means(&w, &[1.0]), Err(Error::LengthMismatch { .. })));
        let mut r = rng(1);
        let w = complete_randomization(30, 12, &mut r).unwrap();
        let y: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut r)).collect();
        let (mut t, mut c, mut nt, mut nc) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..30 {
            if w.is_treated(i) {
                t += y[i];
                nt += 1.0;
            } else {
                c += y[i];
                nc += 1.0;
            }
        }
        assert_relative_eq!(diff_in_means(&w, &y).unwrap(), t / nt - c / nc, epsilon = 1e-14);
    }

    #[test]
    fn p_value_edges() {
        let w = Assignment::new(vec![1, 1, 0, 0]).unwrap();
        let y = [1.0, 2.0, 3.0, 4.0];
        // every reference statistic ties or exceeds the observed one
        let same = ReferenceBatch::from_assignments(vec![w.clone(); 9]);
        assert_relative_eq!(same.statistics(&w, &y).unwrap().p_value(0.0), 1.0);
        // none reach it
        let mid = Assignment::new(vec![1, 0, 0, 1]).unwrap();
        let none = ReferenceBatch::from_assignments(vec![mid; 9]);
        assert_relative_eq!(none.statistics(&w, &y).unwrap().p_value(0.0), 0.1);
    }

    #[test]
    fn p_value_is_deterministic() {
        let des = design(30, 2, 2);
        let c = build_criterion(&CriterionKind::Mahalanobis, &des).unwrap();
        let t = calibrate_exact_chisq(2, 0.1).unwrap();
        let w = complete_randomization(30, 15, &mut rng(3)).unwrap();
        let y: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let a = randomization_test(&des, &c, &t, &w, &y, 0.0, 199, &mut rng(4), 10_000).unwrap();
        let b = randomization_test(&des, &c, &t, &w, &y, 0.0, 199, &mut rng(4), 10_000).unwrap();
        assert_eq!(a, b);
        assert!((1.0 / 200.0..=1.0).contains(&a));
    }

    #[test]
    fn interval_nesting_and_sharp_null() {
        let des = design(40, 2, 5);
        let c = build_criterion(&CriterionKind::Mahalanobis, &des).unwrap();
        let t = calibrate_exact_chisq(2, 0.1).unwrap();
        let res = crate::rerandomizer::rerandomize(&des, &c, &t, &mut rng(6), 10_000).unwrap();
        let w = res.assignment;
        let mut r = rng(7);
        let y0: Vec<f64> =
            (0..40).map(|i| des.row(i)[0] + Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
        let y: Vec<f64> = y0.iter().enumerate().map(|(i, v)| v + if w.is_treated(i) { 1.5 } else { 0.0 }).collect();
        let batch = ReferenceBatch::draw(&des, &c, &t, 999, &mut rng(8), 10_000).unwrap();
        let stats = batch.statistics(&w, &y).unwrap();
        let step = neyman_se(&w, &y).unwrap();
        let narrow = invert_p_values(&stats, 0.8, step).unwrap();
        let wide = invert_p_values(&stats, 0.95, step).unwrap();
        assert!(wide.lo <= narrow.lo && narrow.hi <= wide.hi);
        assert!(wide.contains(stats.tau_hat()));
        assert!(wide.contains(1.5));
    }

    #[test]
    fn asymptotic_without_signal_is_normal_interval() {
        let des = design(200, 3, 9);
        let c = build_criterion(&CriterionKind::Mahalanobis, &des).unwrap();
        let w = complete_randomization(200, 100, &mut rng(10)).unwrap();
        let mut r = rng(11);
        let y: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut r)).collect();
        let plug = plug_in(&des, &w, &y, 0.0).unwrap();
        let normal = |v: f64| 2.0 * 1.959_963_984_540_054 * (v / 200.0).sqrt();

        let unb = asymptotic_inference(&des, &c, &Threshold::unbounded(), &w, &y, 0.95, 200_000, 12, 0.0).unwrap();
        assert!((unb.ci.width() - normal(plug.v_tautau)).abs() < 0.01 * normal(plug.v_tautau));

        // with the fitted coefficients forced to zero the acceptance region is irrelevant
        let t = calibrate_exact_chisq(3, 0.01).unwrap();
        let zero = PlugIn { beta: DVector::zeros(3), ..plug.clone() };
        let mut law = limit_law(&c, &des, &zero, &t, 400_000, 13);
        let q = empirical_quantile(&mut law, 0.975) - empirical_quantile(&mut law, 0.025);
        let expect = normal(plug.v_tautau * (1.0 - plug.r_squared)) * 200f64.sqrt();
        assert!((q - expect).abs() < 0.03 * expect);
    }

    #[test]
    fn asymptotic_conservative_direction_and_errors() {
        let des = design(100, 2, 14);
        let c = build_criterion(&CriterionKind::Euclidean, &des).unwrap();
        let t = crate::threshold::calibrate_gamma(&c, 0.05).unwrap();
        let w = complete_randomization(100, 50, &mut rng(15)).unwrap();
        let mut r = rng(16);
        let y: Vec<f64> =
            (0..100).map(|i| des.row(i)[1] + Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
        let cons = asymptotic_inference(&des, &c, &t, &w, &y, 0.95, 200_000, 17, 0.0).unwrap();
        let less = asymptotic_inference(&des, &c, &t, &w, &y, 0.95, 200_000, 17, 0.3).unwrap();
        assert!(cons.ci.width() >= less.ci.width());
        assert!(cons.conservative);
        let flat = vec![1.0; 100];
        assert!(matches!(
            asymptotic_inference(&des, &c, &t, &w, &flat, 0.95, 10_000, 1, 0.0),
            Err(Error::DegenerateOutcomes)
        ));
    }
}
