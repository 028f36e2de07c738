//! Command execution. Each command returns its report and, for `assign`
//! and `simulate`, a CSV table.

use serde::Serialize;

use qfr_core::config::StudyConfig;
use qfr_core::diagnostics::{
    frobenius_with_se, nu_factors_exact, nu_factors_mc_seeded, post_rerand_covariance, total_variance_reduction,
    total_variance_reduction_se, variance_of_tauhat,
};
use qfr_core::inference::{asymptotic_inference, randomization_inference, InferenceResult};
use qfr_core::report::{
    matrix_rows, read_assignment_csv, read_outcomes_csv, write_assignment_csv, write_simulation_csv, SimulationRecord,
};
use qfr_core::rerandomizer::rerandomize_seeded;
use qfr_core::rng::{derive_seed, TAG_BATCH, TAG_CALIBRATE, TAG_NU};
use qfr_core::simulation::run_comparison;
use qfr_core::threshold::{calibrate_exact, calibrate_gamma, calibrate_mc};
use qfr_core::{
    build_criterion, mean_difference, qform_value, standardize, BalanceCriterion, CovariateMatrix, DesignModel, Error,
    NuFactors, OutcomeModel, Result, Threshold,
};

use crate::config::{CalibrationChoice, Command, InferenceChoice, RunConfig};

/// Stream tag for the assignment loop of `assign`.
const TAG_ASSIGN: u64 = 8;

pub struct Output {
    pub report: String,
    pub table: Option<String>,
}

#[derive(Serialize)]
struct DesignSummary {
    n: usize,
    d: usize,
    n1: usize,
    columns: Vec<String>,
    dropped_columns: Vec<String>,
    lambda: Vec<f64>,
}

#[derive(Serialize)]
struct CriterionSummary {
    label: String,
    kind: qfr_core::CriterionKind,
    rank: usize,
    eta: Vec<f64>,
}

struct Prepared {
    design: DesignModel,
    criterion: BalanceCriterion,
    threshold: Threshold,
    design_summary: DesignSummary,
    criterion_summary: CriterionSummary,
}

fn load_design(cfg: &RunConfig) -> Result<(DesignModel, Vec<String>)> {
    let path = cfg.covariates.as_deref().ok_or_else(|| Error::SchemaViolation("missing covariates file".into()))?;
    let raw = CovariateMatrix::from_csv_path(path)?;
    let (raw, dropped) = if cfg.drop_zero_variance { raw.drop_zero_variance()? } else { (raw, Vec::new()) };
    Ok((standardize(&raw, cfg.treated_fraction)?, dropped))
}

pub fn threshold_for(cfg: &RunConfig, criterion: &BalanceCriterion) -> Result<Threshold> {
    let seed = derive_seed(cfg.seed, &[TAG_CALIBRATE]);
    match cfg.calibration {
        CalibrationChoice::Auto => match calibrate_exact(criterion, cfg.alpha) {
            Err(Error::NotChiSquareCase) => calibrate_mc(criterion, cfg.alpha, cfg.calibration_draws, seed),
            other => other,
        },
        CalibrationChoice::MonteCarlo => calibrate_mc(criterion, cfg.alpha, cfg.calibration_draws, seed),
        CalibrationChoice::Gamma => calibrate_gamma(criterion, cfg.alpha),
    }
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (design, dropped) = load_design(cfg)?;
    let kind = cfg.criterion.resolve(&design, cfg.alpha)?;
    let criterion = build_criterion(&kind, &design)?;
    let threshold = threshold_for(cfg, &criterion)?;
    Ok(Prepared {
        design_summary: DesignSummary {
            n: design.n(),
            d: design.d(),
            n1: design.n1(),
            columns: design.column_names().to_vec(),
            dropped_columns: dropped,
            lambda: design.lambda().iter().copied().collect(),
        },
        criterion_summary: CriterionSummary {
            label: kind.label(),
            kind,
            rank: criterion.rank(),
            eta: criterion.eta().iter().copied().collect(),
        },
        design,
        criterion,
        threshold,
    })
}

fn nu_for(cfg: &RunConfig, criterion: &BalanceCriterion, threshold: &Threshold) -> Result<NuFactors> {
    if criterion.constant_spectrum().is_some()
        && !matches!(threshold.method, qfr_core::CalibrationMethod::MonteCarlo { .. })
    {
        return nu_factors_exact(criterion, threshold);
    }
    nu_factors_mc_seeded(criterion, threshold, cfg.nu_draws, derive_seed(cfg.seed, &[TAG_NU]))
}

#[derive(Serialize)]
struct CalibrateReport<'a> {
    config: &'a RunConfig,
    design: DesignSummary,
    criterion: CriterionSummary,
    threshold: Threshold,
}

#[derive(Serialize)]
struct AssignReport<'a> {
    config: &'a RunConfig,
    design: DesignSummary,
    criterion: CriterionSummary,
    threshold: Threshold,
    draws_used: u64,
    q_value: f64,
    mean_difference: Vec<f64>,
}

#[derive(Serialize)]
struct ValueWithSe {
    value: f64,
    se: f64,
}

#[derive(Serialize)]
struct OutcomeSummary {
    beta: Vec<f64>,
    r_squared: f64,
    v_tautau: f64,
    variance_complete: f64,
    variance_rerandomized: f64,
    percent_reduction: f64,
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    config: &'a RunConfig,
    design: DesignSummary,
    criterion: CriterionSummary,
    threshold: Threshold,
    nu: NuFactors,
    covariance: Vec<Vec<f64>>,
    frobenius_norm: ValueWithSe,
    total_variance_reduction: ValueWithSe,
    percent_reduction_by_covariate: Vec<f64>,
    outcome: Option<OutcomeSummary>,
}

#[derive(Serialize)]
struct InferReport<'a> {
    config: &'a RunConfig,
    design: DesignSummary,
    criterion: CriterionSummary,
    threshold: Threshold,
    observed_q: f64,
    observed_accepted: bool,
    result: InferenceResult,
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    config: &'a RunConfig,
    study: StudyConfig,
    rows: Vec<SimulationRecord>,
}

pub fn run(cfg: &RunConfig) -> Result<Output> {
    cfg.validate()?;
    match cfg.command {
        Command::Calibrate => calibrate(cfg),
        Command::Assign => assign(cfg),
        Command::Diagnose => diagnose(cfg),
        Command::Infer => infer(cfg),
        Command::Simulate => simulate(cfg),
    }
}

fn report_only<T: Serialize>(value: &T) -> Result<Output> {
    Ok(Output { report: qfr_core::report::to_json(value)?, table: None })
}

fn calibrate(cfg: &RunConfig) -> Result<Output> {
    let p = prepare(cfg)?;
    report_only(&CalibrateReport {
        config: cfg,
        design: p.design_summary,
        criterion: p.criterion_summary,
        threshold: p.threshold,
    })
}

fn assign(cfg: &RunConfig) -> Result<Output> {
    let p = prepare(cfg)?;
    let res =
        rerandomize_seeded(&p.design, &p.criterion, &p.threshold, derive_seed(cfg.seed, &[TAG_ASSIGN]), cfg.max_draws)?;
    let mut table = Vec::new();
    write_assignment_csv(&mut table, p.design.unit_ids(), &res.assignment)?;
    let report = qfr_core::report::to_json(&AssignReport {
        config: cfg,
        design: p.design_summary,
        criterion: p.criterion_summary,
        threshold: p.threshold,
        draws_used: res.draws_used,
        q_value: res.q_value,
        mean_difference: res.mean_diff.tau_x.iter().copied().collect(),
    })?;
    Ok(Output { report, table: Some(String::from_utf8(table).expect("csv output is utf-8")) })
}

fn diagnose(cfg: &RunConfig) -> Result<Output> {
    let p = prepare(cfg)?;
    let nu = nu_for(cfg, &p.criterion, &p.threshold)?;
    let cov = post_rerand_covariance(&p.design, &p.criterion, &nu)?;
    let (frob, frob_se) = frobenius_with_se(&p.design, &p.criterion, &nu)?;
    let sigma = p.design.sigma();
    let by_cov = (0..p.design.d()).map(|j| 100.0 * (1.0 - cov[(j, j)] / sigma[(j, j)])).collect();
    let outcome = match (&cfg.assignment, &cfg.outcomes) {
        (Some(a), Some(o)) => {
            let w = read_assignment_csv(a, p.design.unit_ids())?;
            let y = read_outcomes_csv(o, p.design.unit_ids())?;
            let plug = qfr_core::inference::plug_in(&p.design, &w, &y, 0.0)?;
            let model = OutcomeModel::new(plug.beta.clone(), plug.r_squared, plug.v_tautau, &p.design)?;
            let complete = variance_of_tauhat(&p.design, &p.criterion, &NuFactors::ones(&p.criterion), &model)?;
            let rerand = variance_of_tauhat(&p.design, &p.criterion, &nu, &model)?;
            Some(OutcomeSummary {
                beta: plug.beta.iter().copied().collect(),
                r_squared: plug.r_squared,
                v_tautau: plug.v_tautau,
                variance_complete: complete,
                variance_rerandomized: rerand,
                percent_reduction: if complete > 0.0 { 100.0 * (1.0 - rerand / complete) } else { 0.0 },
            })
        }
        _ => None,
    };
    report_only(&DiagnoseReport {
        config: cfg,
        design: p.design_summary,
        criterion: p.criterion_summary,
        threshold: p.threshold,
        covariance: matrix_rows(&cov),
        frobenius_norm: ValueWithSe { value: frob, se: frob_se },
        total_variance_reduction: ValueWithSe {
            value: total_variance_reduction(&nu),
            se: total_variance_reduction_se(&nu),
        },
        percent_reduction_by_covariate: by_cov,
        nu,
        outcome,
    })
}

fn infer(cfg: &RunConfig) -> Result<Output> {
    let p = prepare(cfg)?;
    let missing = || Error::SchemaViolation("infer needs assignment and outcomes files".into());
    let w = read_assignment_csv(cfg.assignment.as_deref().ok_or_else(missing)?, p.design.unit_ids())?;
    let y = read_outcomes_csv(cfg.outcomes.as_deref().ok_or_else(missing)?, p.design.unit_ids())?;
    if w.n1() != p.design.n1() {
        return Err(Error::GroupCountMismatch { expected: p.design.n1(), got: w.n1() });
    }
    let q = qform_value(&p.criterion, &mean_difference(&p.design, &w)?)?;
    let accepted = p.threshold.accepts(q);
    if !accepted {
        log::warn!("observed assignment has Q = {q} above the cutoff {}", p.threshold.a);
    }
    let seed = derive_seed(cfg.seed, &[TAG_BATCH]);
    let result = match cfg.inference {
        InferenceChoice::Randomization => randomization_inference(
            &p.design,
            &p.criterion,
            &p.threshold,
            &w,
            &y,
            cfg.level,
            cfg.reference_draws,
            seed,
            cfg.max_draws,
        )?,
        InferenceChoice::Asymptotic => {
            asymptotic_inference(&p.design, &p.criterion, &p.threshold, &w, &y, cfg.level, cfg.law_draws, seed, 0.0)?
        }
    };
    report_only(&InferReport {
        config: cfg,
        design: p.design_summary,
        criterion: p.criterion_summary,
        threshold: p.threshold,
        observed_q: q,
        observed_accepted: accepted,
        result,
    })
}

fn simulate(cfg: &RunConfig) -> Result<Output> {
    let path = cfg.study.as_deref().ok_or_else(|| Error::SchemaViolation("simulate needs a study file".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut study = StudyConfig::from_json(&text)?;
    study.seed = cfg.seed;
    let mut rows = Vec::new();
    for cell in study.cells()? {
        for r in run_comparison(&cell)? {
            rows.push(SimulationRecord {
                d: cell.d,
                gamma: cell.gamma_conc,
                scenario: cell.scenario.name().to_string(),
                method: r.method,
                sd_ratio: r.sd_ratio,
                mc_se: r.mc_se,
                replications: r.replications,
                seed: cell.seed,
            });
        }
    }
    let mut table = Vec::new();
    write_simulation_csv(&mut table, &rows)?;
    let report = qfr_core::report::to_json(&SimulateReport { config: cfg, study, rows })?;
    Ok(Output { report, table: Some(String::from_utf8(table).expect("csv output is utf-8")) })
}
