//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p qfr-cli --test acceptance -- 1 4`.

use std::path::Path;
use std::process::Command as Proc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use qfr_core::criterion::{build_criterion, BalanceCriterion, CriterionKind};
use qfr_core::diagnostics::{
    estimate_nu, frobenius_with_se, nu_factors_approx, nu_factors_mc_seeded, post_rerand_covariance, regret_grid,
    variance_of_tauhat, worst_case_regret, NuFactors,
};
use qfr_core::inference::{asymptotic_inference, diff_in_means, randomization_inference};
use qfr_core::rerandomizer::{batch_accepted, default_max_draws, rerandomize_seeded};
use qfr_core::simulation::{
    random_orthogonal, run_comparison, sample_eigenvalues, simulate_dataset, MethodSpec, Scenario, SimCalibration,
    SimulationConfig,
};
use qfr_core::threshold::{calibrate_auto, calibrate_exact_chisq, calibrate_mc};
use qfr_core::{mean_difference, standardize, CovariateMatrix, DesignModel, OutcomeModel, SigmaGeometry};

type Check = Result<(bool, String), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Gaussian covariates with covariance `P diag(λ) Pᵀ`, standardized.
fn gaussian_design(n: usize, lambda: &DVector<f64>, r: &mut ChaCha8Rng) -> DesignModel {
    let d = lambda.len();
    let rot = random_orthogonal(d, r);
    let g = DMatrix::from_fn(n, d, |_, _| normal(r));
    let x = g * DMatrix::from_diagonal(&lambda.map(f64::sqrt)) * rot.transpose();
    standardize(&CovariateMatrix::from_values(x).unwrap(), 0.5).unwrap()
}

fn dirichlet_design(n: usize, d: usize, r: &mut ChaCha8Rng) -> DesignModel {
    let lambda = sample_eigenvalues(d, 1.0, r);
    gaussian_design(n, &lambda, r)
}

fn chi2_factor(k: f64, a: f64) -> f64 {
    ChiSquared::new(k + 2.0).unwrap().cdf(a) / ChiSquared::new(k).unwrap().cdf(a)
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Equal factors for Mahalanobis at d = 2, α = 0.05.
fn mahalanobis_equal_factors() -> Check {
    const V_A: f64 = 0.02539;
    let start = Instant::now();
    let geo = SigmaGeometry::from_sigma(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5])).map_err(e)?;
    let crit = build_criterion(&CriterionKind::Mahalanobis, &geo).map_err(e)?;
    let t = calibrate_exact_chisq(2, 0.05).map_err(e)?;
    let a = -2.0 * 0.95f64.ln();
    let nu = nu_factors_mc_seeded(&crit, &t, 2_000_000, 11).map_err(e)?;
    // P(χ²₄ ≤ a) / P(χ²₂ ≤ a) with both CDFs in closed form
    let h = (-a / 2.0).exp();
    let closed = (1.0 - h * (1.0 + a / 2.0)) / (1.0 - h);
    let elapsed = start.elapsed();
    let ok_nu = (0..2).all(|j| (nu.nu[j] - V_A).abs() <= 3.0 * nu.se[j]);
    let ok = ok_nu && (t.a - a).abs() < 1e-12 && within(elapsed, 10);
    Ok((
        ok,
        format!(
            "nu = ({:.5} ± {:.5}, {:.5} ± {:.5}) vs {V_A}, closed form {closed:.6}, {:.1}s",
            nu.nu[0],
            nu.se[0],
            nu.nu[1],
            nu.se[1],
            elapsed.as_secs_f64()
        ),
    ))
}

/// Small-ellipsoid approximation against Monte Carlo factors.
fn approximation_matches_mc() -> Check {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (i, &d) in [2usize, 3, 5].iter().enumerate() {
        let design = gaussian_design(200, &DVector::from_element(d, 1.0), &mut rng(100 + i as u64));
        for &alpha in &[0.01, 0.005] {
            for kind in [CriterionKind::Mahalanobis, CriterionKind::Euclidean, CriterionKind::Ridge { lambda: 0.5 }] {
                let crit = build_criterion(&kind, &design).map_err(e)?;
                let t = calibrate_auto(&crit, alpha, 1_000_000, 7).map_err(e)?;
                let mc = nu_factors_mc_seeded(&crit, &t, (20_000.0 / alpha) as usize, 8).map_err(e)?;
                let approx = nu_factors_approx(&crit, alpha).map_err(e)?;
                for j in 0..d {
                    let rel = (approx.nu[j] - mc.nu[j]).abs() / mc.nu[j];
                    if rel > worst.0 {
                        worst = (rel, format!("d={d} alpha={alpha} {} j={j}", kind.label()));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst.0 <= 0.15 && within(elapsed, 60),
        format!("max relative gap {:.4} at {}, {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    ))
}

/// Covariance of accepted Gaussian draws against the factor formula.
fn accepted_covariance() -> Check {
    let start = Instant::now();
    let mut r = rng(300);
    let design = dirichlet_design(200, 3, &mut r);
    let crit = build_criterion(&CriterionKind::Euclidean, &design).map_err(e)?;
    let t = calibrate_mc(&crit, 0.01, 1_000_000, 31).map_err(e)?;
    let nu = nu_factors_mc_seeded(&crit, &t, 4_000_000, 32).map_err(e)?;
    let predicted = post_rerand_covariance(&design, &crit, &nu).map_err(e)?;

    let chol = design.sigma().clone().cholesky().ok_or("sigma is not positive definite")?;
    let l = chol.l();
    let a = crit.a_matrix();
    let target = 100_000;
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(target);
    let mut g = rng(33);
    while kept.len() < target {
        let z = DVector::from_fn(3, |_, _| normal(&mut g));
        let v = &l * z;
        if v.dot(&(a * &v)) <= t.a {
            kept.push(v);
        }
    }
    let n = target as f64;
    let u = design.sigma_sqrt() * crit.omega();
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let prod: Vec<f64> = kept.iter().map(|v| v[i] * v[j]).collect();
            let mean = prod.iter().sum::<f64>() / n;
            let var = prod.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
            // both sides condition on the same cutoff, so only sampling error enters
            let grad: Vec<f64> = (0..3).map(|k| u[(i, k)] * u[(j, k)]).collect();
            let se_pred: f64 = grad.iter().zip(nu.se.iter()).map(|(g, s)| (g * s).powi(2)).sum();
            let se = (var / n + se_pred).sqrt();
            worst = worst.max((mean - predicted[(i, j)]).abs() / se);
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 3.0 && within(elapsed, 120),
        format!("max |z| = {worst:.2} over 9 entries, {:.1}s", elapsed.as_secs_f64()),
    ))
}

struct DesignCase {
    design: DesignModel,
    nus: Vec<(CriterionKind, BalanceCriterion, NuFactors)>,
}

fn property_designs() -> Result<Vec<DesignCase>, String> {
    let kinds = [
        CriterionKind::Euclidean,
        CriterionKind::Mahalanobis,
        CriterionKind::Ridge { lambda: 0.5 },
        CriterionKind::SquaredEuclidean { exponent: 1.0 },
    ];
    (0..20)
        .map(|i| {
            let d = [3usize, 5, 8][i % 3];
            let design = dirichlet_design(200, d, &mut rng(400 + i as u64));
            let nus = kinds
                .iter()
                .enumerate()
                .map(|(c, kind)| {
                    let crit = build_criterion(kind, &design).map_err(e)?;
                    let (_, nu) = estimate_nu(&crit, 0.01, 400_000, 1000 * i as u64 + c as u64).map_err(e)?;
                    Ok((kind.clone(), crit, nu))
                })
                .collect::<Result<_, String>>()?;
            Ok(DesignCase { design, nus })
        })
        .collect()
}

/// Euclidean has the smallest Frobenius norm of the post-rerandomization covariance.
fn euclidean_frobenius(cases: &[DesignCase], elapsed: Duration) -> Check {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for case in cases {
        let (_, ce, ne) = &case.nus[0];
        let (fe, se_e) = frobenius_with_se(&case.design, ce, ne).map_err(e)?;
        for (_, c, n) in &case.nus[1..] {
            let (fo, se_o) = frobenius_with_se(&case.design, c, n).map_err(e)?;
            let z = (fe - fo) / (se_e * se_e + se_o * se_o).sqrt().max(1e-300);
            worst = worst.max(z);
            if z > 3.0 {
                violations += 1;
            }
        }
    }
    Ok((
        violations == 0 && within(elapsed, 300),
        format!(
            "{violations} violations over {} comparisons, max z {worst:.2}, {:.1}s",
            cases.len() * 3,
            elapsed.as_secs_f64()
        ),
    ))
}

/// Mahalanobis has the smallest sum of factors.
fn mahalanobis_total(cases: &[DesignCase]) -> Check {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for case in cases {
        let (_, _, nm) = &case.nus[1];
        let sm: f64 = nm.nu.sum();
        for (k, (_, _, n)) in case.nus.iter().enumerate() {
            if k == 1 {
                continue;
            }
            let so: f64 = n.nu.sum();
            let se = (nm.propagate(&vec![1.0; nm.len()]).powi(2) + n.propagate(&vec![1.0; n.len()]).powi(2)).sqrt();
            let z = (sm - so) / se.max(1e-300);
            worst = worst.max(z);
            if z > 3.0 {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations over {} comparisons, max z {worst:.2}", cases.len() * 3)))
}

/// The rank-one criterion built from β gives the smallest variance and the
/// predicted percent reduction.
fn oracle_optimal() -> Check {
    let alpha = 0.01;
    let chi1 = ChiSquared::new(1.0).unwrap();
    let nu_star = chi2_factor(1.0, chi1.inverse_cdf(alpha));
    let scenarios = [Scenario::BottomWeighted, Scenario::Uniform, Scenario::TopWeighted];
    let mut worst_gap = 0.0f64;
    let mut not_min = 0;
    for i in 0..10 {
        let cfg = SimulationConfig {
            d: 5,
            gamma_conc: 1.0,
            n: 500,
            p: 0.5,
            tau: 1.0,
            scenario: scenarios[i % 3],
            alpha,
            replications: 1,
            methods: vec![MethodSpec::Oracle],
            seed: 0,
            calibration: SimCalibration::default(),
        };
        let data = simulate_dataset(&cfg, &mut rng(600 + i as u64)).map_err(e)?;
        let design = &data.design;
        let outcome: &OutcomeModel = &data.outcome;
        let beta: Vec<f64> = outcome.beta().ok_or("no beta")?.iter().copied().collect();
        let kinds = [
            CriterionKind::Mahalanobis,
            CriterionKind::Euclidean,
            CriterionKind::SquaredEuclidean { exponent: 1.0 },
            CriterionKind::Ridge { lambda: 0.5 },
            CriterionKind::WeightedEuclidean { weights: vec![1.0, 2.0, 3.0, 4.0, 5.0] },
            CriterionKind::pca_mahalanobis(2),
            CriterionKind::Custom {
                matrix: vec![
                    vec![1.0, 0.5, 0.0, 0.0, 0.0],
                    vec![0.5, 1.0, 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, 1.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, 1.0, 0.0],
                    vec![0.0, 0.0, 0.0, 0.0, 1.0],
                ],
            },
        ];
        let oracle = build_criterion(&CriterionKind::Oracle { beta }, design).map_err(e)?;
        let (_, nu_o) = estimate_nu(&oracle, alpha, 200_000, 1).map_err(e)?;
        let v_oracle = variance_of_tauhat(design, &oracle, &nu_o, outcome).map_err(e)?;
        let v_complete = variance_of_tauhat(design, &oracle, &NuFactors::ones(&oracle), outcome).map_err(e)?;
        for (c, kind) in kinds.iter().enumerate() {
            let crit = build_criterion(kind, design).map_err(e)?;
            let (_, nu) = estimate_nu(&crit, alpha, 200_000, 10 + c as u64).map_err(e)?;
            let v = variance_of_tauhat(design, &crit, &nu, outcome).map_err(e)?;
            if v_oracle > v {
                not_min += 1;
            }
        }
        let percent = 100.0 * (1.0 - v_oracle / v_complete);
        let predicted = 100.0 * (1.0 - nu_star) * outcome.r_squared();
        worst_gap = worst_gap.max((percent - predicted).abs());
    }
    Ok((
        not_min == 0 && worst_gap <= 2.0,
        format!("oracle beaten {not_min} times over 70 comparisons, max |percent gap| {worst_gap:.2e} (nu* = {nu_star:.3e})"),
    ))
}

/// Worst-case regret over the vertex grid.
fn euclidean_regret() -> Check {
    let alpha = 0.005;
    let geo = SigmaGeometry::from_sigma(DMatrix::from_diagonal(&DVector::from_vec(vec![1.8, 0.2]))).map_err(e)?;
    let grid = regret_grid(2, 1.0, 0, &mut rng(7));
    let mut out = Vec::new();
    for (c, kind) in
        [CriterionKind::Euclidean, CriterionKind::Mahalanobis, CriterionKind::SquaredEuclidean { exponent: 1.0 }]
            .iter()
            .enumerate()
    {
        let crit = build_criterion(kind, &geo).map_err(e)?;
        let (_, nu) = estimate_nu(&crit, alpha, 1_000_000, 70 + c as u64).map_err(e)?;
        let r = worst_case_regret(&geo, &crit, &nu, alpha, &grid).map_err(e)?;
        out.push((kind.label(), r.value, r.se));
    }
    let ok = out[0].1 <= out[1].1 && out[0].1 <= out[2].1;
    let detail = out.iter().map(|(l, v, s)| format!("{l} {v:.5} ± {s:.5}")).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

/// Ordering of SD ratios in the d = 25, γ = 0.05 study.
fn simulation_ordering() -> Check {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for (s, scenario) in [Scenario::BottomWeighted, Scenario::Uniform, Scenario::TopWeighted].into_iter().enumerate() {
        let cfg = SimulationConfig {
            d: 25,
            gamma_conc: 0.05,
            n: 500,
            p: 0.5,
            tau: 1.0,
            scenario,
            alpha: 0.01,
            replications: 500,
            methods: vec![MethodSpec::Mahalanobis, MethodSpec::Euclidean, MethodSpec::Oracle],
            seed: 2024 + s as u64,
            calibration: SimCalibration::default(),
        };
        let rows = run_comparison(&cfg).map_err(e)?;
        let (m, eu, o) = (&rows[0], &rows[1], &rows[2]);
        ok &= o.sd_ratio < m.sd_ratio && o.sd_ratio < eu.sd_ratio;
        match scenario {
            Scenario::BottomWeighted => ok &= m.sd_ratio < eu.sd_ratio,
            Scenario::TopWeighted => ok &= m.sd_ratio > eu.sd_ratio,
            Scenario::Uniform => {}
        }
        lines.push(format!(
            "{}: mahalanobis {:.4}±{:.4} euclidean {:.4}±{:.4} oracle {:.4}±{:.4}",
            scenario.name(),
            m.sd_ratio,
            m.mc_se,
            eu.sd_ratio,
            eu.mc_se,
            o.sd_ratio,
            o.mc_se
        ));
    }
    let elapsed = start.elapsed();
    Ok((ok && within(elapsed, 900), format!("{}; {:.1}s", lines.join("; "), elapsed.as_secs_f64())))
}

/// Mean of τ̂ and of τ̂_X over accepted assignments.
fn unbiasedness() -> Check {
    let mut r = rng(900);
    let design = dirichlet_design(100, 3, &mut r);
    let tau = 2.0;
    let y0: Vec<f64> = (0..100).map(|i| design.row(i).iter().sum::<f64>() + normal(&mut r)).collect();
    let y1: Vec<f64> = y0.iter().map(|v| v + tau).collect();
    let crit = build_criterion(&CriterionKind::Mahalanobis, &design).map_err(e)?;
    let t = calibrate_exact_chisq(3, 0.01).map_err(e)?;
    let batch = batch_accepted(&design, &crit, &t, 2000, &mut r, default_max_draws(0.01)).map_err(e)?;
    let mut taus = Vec::new();
    let mut xs: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for res in &batch {
        let w = &res.assignment;
        let y: Vec<f64> = (0..100).map(|i| if w.is_treated(i) { y1[i] } else { y0[i] }).collect();
        taus.push(diff_in_means(w, &y).map_err(e)?);
        let md = mean_difference(&design, w).map_err(e)?;
        for (col, v) in xs.iter_mut().zip(md.tau_x.iter()) {
            col.push(*v);
        }
    }
    let z = |v: &[f64], target: f64| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        (m - target) / (sd / n.sqrt())
    };
    let zt = z(&taus, tau);
    let zx: Vec<f64> = xs.iter().map(|v| z(v, 0.0)).collect();
    let ok = zt.abs() <= 3.0 && zx.iter().all(|v| v.abs() <= 3.0);
    Ok((ok, format!("z(tau_hat) = {zt:.2}, z(tau_x) = ({:.2}, {:.2}, {:.2})", zx[0], zx[1], zx[2])))
}

struct Experiment {
    design: DesignModel,
    crit: BalanceCriterion,
    t: qfr_core::Threshold,
    w: qfr_core::Assignment,
    y: Vec<f64>,
    tau: f64,
}

/// One rerandomized experiment with n = 60, d = 3; `effects(i, rng)` gives
/// the unit-level effects.
fn experiment(seed: u64, effects: impl Fn(&mut ChaCha8Rng) -> f64) -> Result<Experiment, String> {
    let mut r = rng(seed);
    let design = dirichlet_design(60, 3, &mut r);
    let crit = build_criterion(&CriterionKind::Mahalanobis, &design).map_err(e)?;
    let t = calibrate_exact_chisq(3, 0.01).map_err(e)?;
    let y0: Vec<f64> = (0..60).map(|i| design.row(i).iter().sum::<f64>() + normal(&mut r)).collect();
    let eff: Vec<f64> = (0..60).map(|_| effects(&mut r)).collect();
    let tau = eff.iter().sum::<f64>() / 60.0;
    let w = rerandomize_seeded(&design, &crit, &t, seed ^ 0xA5A5, default_max_draws(0.01)).map_err(e)?.assignment;
    let y = (0..60).map(|i| if w.is_treated(i) { y0[i] + eff[i] } else { y0[i] }).collect();
    Ok(Experiment { design, crit, t, w, y, tau })
}

fn inference_validity() -> Check {
    let start = Instant::now();
    let m = 999;
    let mut rejections = 0;
    for k in 0..500 {
        let x = experiment(40_000 + k, |_| 0.0)?;
        let res = randomization_inference(&x.design, &x.crit, &x.t, &x.w, &x.y, 0.95, m, k, default_max_draws(0.01))
            .map_err(e)?;
        if res.p_value <= 0.05 {
            rejections += 1;
        }
    }
    let size = rejections as f64 / 500.0;
    let mut covered = 0;
    for k in 0..300 {
        let x = experiment(20_000 + k, |_| 1.0)?;
        let res = randomization_inference(&x.design, &x.crit, &x.t, &x.w, &x.y, 0.95, m, k, default_max_draws(0.01))
            .map_err(e)?;
        if res.ci.contains(x.tau) {
            covered += 1;
        }
    }
    let coverage = covered as f64 / 300.0;
    let mut covered_asym = 0;
    for k in 0..300 {
        let x = experiment(30_000 + k, |r| 1.0 + 2.0 * normal(r))?;
        let res = asymptotic_inference(&x.design, &x.crit, &x.t, &x.w, &x.y, 0.95, 100_000, k, 0.0).map_err(e)?;
        if res.ci.contains(x.tau) {
            covered_asym += 1;
        }
    }
    let coverage_asym = covered_asym as f64 / 300.0;
    let elapsed = start.elapsed();
    let ok = (0.03..=0.07).contains(&size) && coverage >= 0.93 && coverage_asym >= 0.95 && within(elapsed, 1200);
    Ok((
        ok,
        format!(
            "size {size:.3}, randomization coverage {coverage:.3}, asymptotic coverage {coverage_asym:.3}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn write_inputs(dir: &Path) {
    let mut r = rng(1100);
    let n = 80;
    let lambda = DVector::from_vec(vec![2.0, 1.0, 0.6, 0.4]);
    let g = DMatrix::from_fn(n, 4, |_, _| normal(&mut r));
    let x = g * DMatrix::from_diagonal(&lambda.map(f64::sqrt));
    let mut cov = String::from("unit_id,age,income,score,visits\n");
    let mut out = String::from("unit_id,y\n");
    let mut asg = String::from("unit_id,w\n");
    for i in 0..n {
        let row: Vec<String> = (0..4).map(|j| x[(i, j)].to_string()).collect();
        cov.push_str(&format!("p{i},{}\n", row.join(",")));
        let w = (i % 2) as f64;
        out.push_str(&format!("p{i},{}\n", x[(i, 0)] - 0.5 * x[(i, 2)] + normal(&mut r) + w));
        asg.push_str(&format!("p{i},{}\n", i % 2));
    }
    std::fs::write(dir.join("x.csv"), cov).unwrap();
    std::fs::write(dir.join("y.csv"), out).unwrap();
    std::fs::write(dir.join("w.csv"), asg).unwrap();
    std::fs::write(
        dir.join("study.json"),
        r#"{"d":[3],"gamma":[0.5],"scenarios":["uniform","top_weighted"],
"methods":[{"method":"complete"},{"method":"mahalanobis"},{"method":"euclidean"},{"method":"pca_kaiser"}],
"n":60,"replications":20,"calibration":{"type":"monte_carlo","draws":20000}}"#,
    )
    .unwrap();
}

fn cli_runs(dir: &Path, threads: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let bin = env!("CARGO_BIN_EXE_qfr");
    let runs: Vec<Vec<&str>> = vec![
        vec!["calibrate", "--covariates", "x.csv", "--method", "euclidean", "--report", "calibrate.json"],
        vec![
            "assign",
            "--covariates",
            "x.csv",
            "--method",
            "ridge",
            "--lambda",
            "0.5",
            "--output",
            "assign.csv",
            "--report",
            "assign.json",
        ],
        vec![
            "diagnose",
            "--covariates",
            "x.csv",
            "--method",
            "euclidean",
            "--assignment",
            "w.csv",
            "--outcomes",
            "y.csv",
            "--report",
            "diagnose.json",
        ],
        vec![
            "infer",
            "--covariates",
            "x.csv",
            "--method",
            "euclidean",
            "--assignment",
            "w.csv",
            "--outcomes",
            "y.csv",
            "--reference-draws",
            "199",
            "--report",
            "infer.json",
        ],
        vec![
            "infer",
            "--covariates",
            "x.csv",
            "--assignment",
            "w.csv",
            "--outcomes",
            "y.csv",
            "--inference",
            "asymptotic",
            "--report",
            "asymptotic.json",
        ],
        vec!["simulate", "--study", "study.json", "--output", "sim.csv", "--report", "sim.json"],
    ];
    let mut outputs = Vec::new();
    for args in runs {
        let out = Proc::new(bin)
            .current_dir(dir)
            .args(["--threads", &threads.to_string()])
            .args(&args)
            .args(["--seed", "77", "--alpha", "0.05"])
            .output()
            .map_err(e)?;
        if !out.status.success() {
            return Err(format!("{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr)));
        }
        outputs.push((format!("{} stdout", args[0]), out.stdout));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir).map_err(e)?.map(|f| f.unwrap().path()).collect();
    files.sort();
    for f in files {
        outputs.push((f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&f).map_err(e)?));
    }
    Ok(outputs)
}

fn determinism() -> Check {
    let mut results = Vec::new();
    for threads in [1usize, 4, 1] {
        let dir = tempfile::tempdir().map_err(e)?;
        write_inputs(dir.path());
        results.push(cli_runs(dir.path(), threads)?);
    }
    let same = results[0] == results[1] && results[0] == results[2];
    let files = results[0].iter().filter(|(n, _)| !n.ends_with("stdout")).count();
    Ok((same, format!("{} outputs ({files} files) compared across 1, 4 and 1 threads", results[0].len())))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut failures = 0;
    let mut report = |k: usize, name: &str, check: Check| {
        let (tag, detail) = match check {
            Ok((true, d)) => ("PASS", d),
            Ok((false, d)) => ("FAIL", d),
            Err(err) => ("FAIL", format!("error: {err}")),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("[{tag}] criterion {k:>2} {name}: {detail}");
    };
    if want(1) {
        report(1, "mahalanobis_equal_factors", mahalanobis_equal_factors());
    }
    if want(2) {
        report(2, "approximation_matches_mc", approximation_matches_mc());
    }
    if want(3) {
        report(3, "accepted_covariance", accepted_covariance());
    }
    if want(4) || want(5) {
        let start = Instant::now();
        match property_designs() {
            Ok(cases) => {
                let elapsed = start.elapsed();
                if want(4) {
                    report(4, "euclidean_min_frobenius", euclidean_frobenius(&cases, elapsed));
                }
                if want(5) {
                    report(5, "mahalanobis_min_total_factor", mahalanobis_total(&cases));
                }
            }
            Err(err) => {
                if want(4) {
                    report(4, "euclidean_min_frobenius", Err(err.clone()));
                }
                if want(5) {
                    report(5, "mahalanobis_min_total_factor", Err(err));
                }
            }
        }
    }
    if want(6) {
        report(6, "oracle_optimal", oracle_optimal());
    }
    if want(7) {
        report(7, "euclidean_regret", euclidean_regret());
    }
    if want(8) {
        report(8, "simulation_ordering", simulation_ordering());
    }
    if want(9) {
        report(9, "unbiasedness", unbiasedness());
    }
    if want(10) {
        report(10, "inference_validity", inference_validity());
    }
    if want(11) {
        report(11, "determinism", determinism());
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
