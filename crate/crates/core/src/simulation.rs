//! Simulation study: random spectra, rotated Gaussian covariates, outcome
//! scenarios and standard-deviation ratios against complete randomization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariate::{standardize, CovariateMatrix, DesignModel};
use crate::criterion::{
    build_criterion, choose_k_kaiser, choose_k_variance_explained, choose_k_weighted_eigenvalue, CriterionKind, KRuleNu,
};
use crate::diagnostics::OutcomeModel;
use crate::error::{Error, Result};
use crate::inference::diff_in_means;
use crate::rerandomizer::{complete_randomization, default_max_draws, rerandomize_seeded};
use crate::rng::{derive_seed, substream, StreamRng, TAG_SIM};
use crate::threshold::{calibrate_exact, calibrate_gamma, calibrate_mc, Threshold};

/// Which principal components carry the outcome signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// `β_Z = (λ_d, …, λ_1)`.
    BottomWeighted,
    /// `β_Z = (1, …, 1)`.
    Uniform,
    /// `β_Z = (λ_1^{1/2}, …, λ_d^{1/2})`.
    TopWeighted,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::BottomWeighted => "bottom_weighted",
            Scenario::Uniform => "uniform",
            Scenario::TopWeighted => "top_weighted",
        }
    }

    /// Coefficients on the principal components for descending `lambda`.
    pub fn beta_z(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let d = lambda.len();
        match self {
            Scenario::BottomWeighted => DVector::from_fn(d, |j, _| lambda[d - 1 - j]),
            Scenario::Uniform => DVector::from_element(d, 1.0),
            Scenario::TopWeighted => lambda.map(f64::sqrt),
        }
    }
}

/// An assignment mechanism compared in the study. Criteria that depend on
/// the data (chosen k, oracle β) are resolved per dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Complete,
    Mahalanobis,
    Euclidean,
    SquaredEuclidean { exponent: f64 },
    Ridge { lambda: f64 },
    PcaKaiser,
    PcaWeightedEigenvalue,
    PcaFixed { k: usize },
    PcaVarianceExplained { fraction: f64 },
    Oracle,
}

impl MethodSpec {
    pub fn name(&self) -> String {
        match self {
            MethodSpec::Complete => "complete".into(),
            MethodSpec::Mahalanobis => "mahalanobis".into(),
            MethodSpec::Euclidean => "euclidean".into(),
            MethodSpec::SquaredEuclidean { exponent } => format!("squared_euclidean_c{exponent}"),
            MethodSpec::Ridge { lambda } => format!("ridge_{lambda}"),
            MethodSpec::PcaKaiser => "pca_kaiser".into(),
            MethodSpec::PcaWeightedEigenvalue => "pca_weighted_eigenvalue".into(),
            MethodSpec::PcaFixed { k } => format!("pca_k{k}"),
            MethodSpec::PcaVarianceExplained { fraction } => format!("pca_var{fraction}"),
            MethodSpec::Oracle => "oracle".into(),
        }
    }

    /// The criterion this method uses on a dataset, `None` for complete
    /// randomization.
    pub fn resolve(&self, design: &DesignModel, outcome: &OutcomeModel, alpha: f64) -> Result<Option<CriterionKind>> {
        Ok(Some(match self {
            MethodSpec::Complete => return Ok(None),
            // on a rank-deficient design, Mahalanobis on the identified principal subspace
            MethodSpec::Mahalanobis if !design.is_full_rank() => CriterionKind::pca_mahalanobis(design.rank()),
            MethodSpec::Mahalanobis => CriterionKind::Mahalanobis,
            MethodSpec::Euclidean => CriterionKind::Euclidean,
            MethodSpec::SquaredEuclidean { exponent } => CriterionKind::SquaredEuclidean { exponent: *exponent },
            MethodSpec::Ridge { lambda } => CriterionKind::Ridge { lambda: *lambda },
            MethodSpec::PcaKaiser => CriterionKind::pca_mahalanobis(choose_k_kaiser(design)),
            MethodSpec::PcaWeightedEigenvalue => {
                CriterionKind::pca_mahalanobis(choose_k_weighted_eigenvalue(design, alpha, None, KRuleNu::Exact)?)
            }
            MethodSpec::PcaFixed { k } => CriterionKind::pca_mahalanobis(*k),
            MethodSpec::PcaVarianceExplained { fraction } => {
                CriterionKind::pca_mahalanobis(choose_k_variance_explained(design, *fraction)?)
            }
            MethodSpec::Oracle => {
                let beta = outcome.beta().ok_or(Error::MissingOutcomeModel)?;
                CriterionKind::Oracle { beta: beta.iter().copied().collect() }
            }
        }))
    }
}

/// How cutoffs are calibrated for criteria without a closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimCalibration {
    MonteCarlo { draws: usize },
    Gamma,
}

impl Default for SimCalibration {
    fn default() -> Self {
        SimCalibration::MonteCarlo { draws: 50_000 }
    }
}

/// One cell of a simulation study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub d: usize,
    pub gamma_conc: f64,
    pub n: usize,
    pub p: f64,
    pub tau: f64,
    pub scenario: Scenario,
    pub alpha: f64,
    pub replications: usize,
    pub methods: Vec<MethodSpec>,
    pub seed: u64,
    #[serde(default)]
    pub calibration: SimCalibration,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if !(self.gamma_conc > 0.0 && self.gamma_conc.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma_conc));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p must be in (0, 1), got {}", self.p));
        }
        let n1 = self.n as f64 * self.p;
        if (n1 - n1.round()).abs() > 1e-9 || n1 < 1.0 || n1.round() as usize >= self.n {
            return Err(Error::NonIntegerGroupSize(n1));
        }
        if self.n <= self.d {
            return bad(format!("need more units than covariates (n = {}, d = {})", self.n, self.d));
        }
        if let Some(MethodSpec::PcaFixed { k }) =
            self.methods.iter().find(|m| matches!(m, MethodSpec::PcaFixed { k } if *k == 0 || *k > self.d))
        {
            return bad(format!("pca k = {k} outside 1..={}", self.d));
        }
        Ok(())
    }
}

/// Gamma(shape) draw returned on the log scale, safe for tiny shapes.
fn log_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        return g.ln();
    }
    // G(a) = G(a + 1) · U^{1/a}
    let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    g.ln() + u.ln() / shape
}

/// `d · Dirichlet(γ, …, γ)`, sorted descending.
pub fn sample_eigenvalues<R: Rng + ?Sized>(d: usize, gamma_conc: f64, rng: &mut R) -> DVector<f64> {
    let logs: Vec<f64> = (0..d).map(|_| log_gamma_draw(gamma_conc, rng)).collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v *= d as f64 / total;
    }
    w.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(w)
}

/// Haar-distributed orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| -> f64 { StandardNormal.sample(rng) });
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// One simulated experiment population.
#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub design: DesignModel,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub outcome: OutcomeModel,
    /// Generating eigenvalues.
    pub lambda: DVector<f64>,
    pub beta_z: DVector<f64>,
}

pub fn simulate_dataset<R: Rng + ?Sized>(config: &SimulationConfig, rng: &mut R) -> Result<SimulatedDataset> {
    config.validate()?;
    let (n, d) = (config.n, config.d);
    let lambda = sample_eigenvalues(d, config.gamma_conc, rng);
    let rot = random_orthogonal(d, rng);
    let g = DMatrix::from_fn(n, d, |_, _| -> f64 { StandardNormal.sample(rng) });
    let x = g * DMatrix::from_diagonal(&lambda.map(f64::sqrt)) * rot.transpose();
    let design = standardize(&CovariateMatrix::from_values(x)?, config.p)?;
    let beta_z = config.scenario.beta_z(&lambda);
    let signal = design.x_std() * (design.svd_v() * &beta_z);
    let y0: Vec<f64> = signal
        .iter()
        .map(|s| {
            let e: f64 = StandardNormal.sample(rng);
            s + e
        })
        .collect();
    let y1: Vec<f64> = y0.iter().map(|v| v + config.tau).collect();
    let outcome = OutcomeModel::from_potential_outcomes(&design, &y0, &y1)?;
    Ok(SimulatedDataset { design, y0, y1, outcome, lambda, beta_z })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub sd_ratio: f64,
    pub mc_se: f64,
    /// Mean of the estimates, a bias check.
    pub mean_tau_hat: f64,
    pub replications: usize,
}

fn calibrate(
    criterion: &crate::criterion::BalanceCriterion,
    config: &SimulationConfig,
    seed: u64,
) -> Result<Threshold> {
    match calibrate_exact(criterion, config.alpha) {
        Err(Error::NotChiSquareCase) => match config.calibration {
            SimCalibration::MonteCarlo { draws } => calibrate_mc(criterion, config.alpha, draws, seed),
            SimCalibration::Gamma => calibrate_gamma(criterion, config.alpha),
        },
        other => other,
    }
}

/// Estimates from one replication: complete randomization first, then one
/// per method.
fn replicate(config: &SimulationConfig, rep: usize) -> Result<Vec<f64>> {
    let base = derive_seed(config.seed, &[TAG_SIM, rep as u64]);
    let mut data_rng = substream(base, 0);
    let data = simulate_dataset(config, &mut data_rng)?;
    let observed = |w: &crate::rerandomizer::Assignment| -> Vec<f64> {
        (0..config.n).map(|i| if w.is_treated(i) { data.y1[i] } else { data.y0[i] }).collect()
    };
    let mut cr_rng = substream(base, 1);
    let w = complete_randomization(config.n, data.design.n1(), &mut cr_rng)?;
    let mut out = vec![diff_in_means(&w, &observed(&w))?];
    for (m, method) in config.methods.iter().enumerate() {
        let stream = 2 + m as u64;
        let tau_hat = match method.resolve(&data.design, &data.outcome, config.alpha)? {
            None => {
                let w = complete_randomization(config.n, data.design.n1(), &mut substream(base, stream))?;
                diff_in_means(&w, &observed(&w))?
            }
            Some(kind) => {
                let crit = build_criterion(&kind, &data.design)?;
                let t = calibrate(&crit, config, derive_seed(base, &[stream]))?;
                let seed = substream(base, stream).next_u64();
                let res = rerandomize_seeded(&data.design, &crit, &t, seed, default_max_draws(config.alpha))?;
                diff_in_means(&res.assignment, &observed(&res.assignment))?
            }
        };
        out.push(tau_hat);
    }
    Ok(out)
}

fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let kurt = if m2 > 0.0 { m4 / (m2 * m2) } else { 3.0 };
    (mean, (m2 * n / (n - 1.0)).sqrt(), kurt)
}

/// SD of `τ̂` under each method divided by the SD under complete
/// randomization, across replications sharing datasets.
pub fn run_comparison(config: &SimulationConfig) -> Result<Vec<ComparisonRow>> {
    config.validate()?;
    let reps = config.replications;
    let estimates: Vec<Vec<f64>> = (0..reps).into_par_iter().map(|r| replicate(config, r)).collect::<Result<_>>()?;
    let column = |j: usize| -> Vec<f64> { estimates.iter().map(|row| row[j]).collect() };
    let (_, sd_cr, k_cr) = moments(&column(0));
    let n = reps as f64;
    Ok(config
        .methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let (mean, sd, kurt) = moments(&column(m + 1));
            let ratio = if sd_cr > 0.0 { sd / sd_cr } else { f64::NAN };
            // delta method on log SDs, the two samples treated as independent
            let var_log = ((kurt - 1.0) + (k_cr - 1.0)) / (4.0 * n);
            ComparisonRow {
                method: method.name(),
                sd_ratio: ratio,
                mc_se: ratio * var_log.max(0.0).sqrt(),
                mean_tau_hat: mean,
                replications: reps,
            }
        })
        .collect())
}

/// Reproducible generator for a replication, exposed for callers that
/// want the dataset behind a given row.
pub fn replication_rng(config: &SimulationConfig, rep: usize) -> StreamRng {
    substream(derive_seed(config.seed, &[TAG_SIM, rep as u64]), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    fn config(d: usize, scenario: Scenario, methods: Vec<MethodSpec>, reps: usize) -> SimulationConfig {
        SimulationConfig {
            d,
            gamma_conc: 1.0,
            n: 100,
            p: 0.5,
            tau: 1.0,
            scenario,
            alpha: 0.05,
            replications: reps,
            methods,
            seed: 42,
            calibration: SimCalibration::Gamma,
        }
    }

    #[test]
    fn eigenvalues_sum_to_dimension() {
        let mut r = rng(1);
        for &g in &[0.01, 0.05, 1.0, 1000.0] {
            for _ in 0..50 {
                let l = sample_eigenvalues(10, g, &mut r);
                assert_relative_eq!(l.sum(), 10.0, epsilon = 1e-10);
                assert!(l.iter().zip(l.iter().skip(1)).all(|(a, b)| a >= b));
                assert!(l.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }

    #[test]
    fn concentration_extremes() {
        let mut r = rng(2);
        let close =
            (0..1000).filter(|_| sample_eigenvalues(10, 1000.0, &mut r).iter().all(|l| (l - 1.0).abs() < 0.2)).count();
        assert!(close >= 990);
        let sparse = (0..1000).filter(|_| sample_eigenvalues(10, 0.05, &mut r)[0] / 10.0 > 0.5).count();
        assert!(sparse > 500);
    }

    #[test]
    fn orthogonal_matrices() {
        let mut r = rng(3);
        let one = random_orthogonal(1, &mut r);
        assert_relative_eq!(one[(0, 0)].abs(), 1.0, epsilon = 1e-15);
        let q = random_orthogonal(6, &mut r);
        assert!((q.transpose() * &q - DMatrix::identity(6, 6)).amax() <= 1e-10);
    }

    #[test]
    fn orthogonal_columns_uniform_on_sphere() {
        // first coordinate of a uniform point on S² is uniform on [-1, 1]
        let mut r = rng(4);
        let draws = 10_000;
        let mut bins = [0usize; 10];
        for _ in 0..draws {
            let q = random_orthogonal(3, &mut r);
            let u = q[(0, 0)];
            bins[(((u + 1.0) / 2.0 * 10.0) as usize).min(9)] += 1;
        }
        let expect = draws as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&b| (b as f64 - expect).powi(2) / expect).sum();
        // 99.9% point of χ²₉
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn dataset_properties() {
        let mut cfg = config(5, Scenario::Uniform, vec![], 1);
        cfg.n = 500;
        cfg.tau = 0.0;
        let data = simulate_dataset(&cfg, &mut rng(5)).unwrap();
        assert_eq!(data.y0, data.y1);
        let x = data.design.x_std();
        for col in x.column_iter() {
            assert!(col.mean().abs() < 1e-10);
        }
        // least squares of y0 on the principal components recovers β_Z
        let z = x * data.design.svd_v();
        let y = DVector::from_vec(data.y0.clone());
        let ztz = z.transpose() * &z;
        let inv = ztz.clone().try_inverse().unwrap();
        let yc = &y - DVector::from_element(500, y.mean());
        let fit = &inv * z.transpose() * &yc;
        let resid = &yc - &z * &fit;
        let s2 = resid.norm_squared() / (500.0 - 6.0);
        for j in 0..5 {
            let se = (s2 * inv[(j, j)]).sqrt();
            assert!((fit[j] - data.beta_z[j]).abs() < 3.0 * se, "{j}");
        }
    }

    #[test]
    fn zero_signal_gives_small_r_squared() {
        let mut cfg = config(4, Scenario::Uniform, vec![], 1);
        cfg.n = 400;
        let mut r = rng(6);
        let mut data = simulate_dataset(&cfg, &mut r).unwrap();
        let noise: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut r)).collect();
        data.y0 = noise.clone();
        let out = OutcomeModel::from_potential_outcomes(
            &data.design,
            &noise,
            &noise.iter().map(|v| v + 1.0).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(out.r_squared() < 0.05);
    }

    #[test]
    fn complete_only_ratio_is_one() {
        let cfg = config(3, Scenario::Uniform, vec![MethodSpec::Complete], 400);
        let rows = run_comparison(&cfg).unwrap();
        assert!((rows[0].sd_ratio - 1.0).abs() < 3.0 * rows[0].mc_se);
    }

    #[test]
    fn comparison_is_deterministic() {
        let cfg = config(
            3,
            Scenario::TopWeighted,
            vec![MethodSpec::Mahalanobis, MethodSpec::Euclidean, MethodSpec::Oracle],
            30,
        );
        let a = run_comparison(&cfg).unwrap();
        let b = run_comparison(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.sd_ratio < 1.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(3, Scenario::Uniform, vec![], 0);
        assert!(cfg.validate().is_err());
        cfg.replications = 1;
        cfg.n = 101;
        assert!(matches!(cfg.validate(), Err(Error::NonIntegerGroupSize(_))));
        cfg.n = 100;
        cfg.methods = vec![MethodSpec::PcaFixed { k: 4 }];
        assert!(cfg.validate().is_err());
    }
}
