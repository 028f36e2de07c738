use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use qfr_cli::config::{
    CalibrationChoice, Command, CriterionSpec, InferenceChoice, MethodName, RunConfig, DEFAULT_ALPHA,
};
use qfr_cli::run;
use qfr_core::Error;

/// Rerandomized experimental designs: calibrate, assign, diagnose, infer
/// and simulate.
#[derive(Parser)]
#[command(name = "qfr", version)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Cutoff for the chosen criterion and acceptance probability.
    Calibrate(DesignArgs),
    /// Draw one accepted assignment; writes `unit_id,w` rows.
    Assign {
        #[command(flatten)]
        design: DesignArgs,
        /// Assignment CSV (stdout when absent).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Variance reduction factors and post-rerandomization covariance.
    Diagnose {
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long, requires = "outcomes")]
        assignment: Option<PathBuf>,
        #[arg(long, requires = "assignment")]
        outcomes: Option<PathBuf>,
        #[arg(long)]
        nu_draws: Option<usize>,
    },
    /// Test and interval for an additive effect.
    Infer {
        #[command(flatten)]
        design: DesignArgs,
        #[arg(long)]
        assignment: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        inference: InferenceChoice,
        /// Accepted reference assignments for the randomization test.
        #[arg(long, default_value_t = 999)]
        reference_draws: usize,
        /// Draws from the asymptotic law.
        #[arg(long, default_value_t = 100_000)]
        law_draws: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Simulation study over a grid of settings; writes one CSV row per
    /// cell and method. The run seed replaces any seed in the study file.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        study: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Execute a saved run configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target acceptance probability.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// JSON report (stdout when absent and no table goes there).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    emit_config: bool,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Covariate CSV with a `unit_id` column.
    #[arg(long)]
    covariates: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    treated_fraction: f64,
    #[arg(long)]
    drop_zero_variance: bool,
    #[arg(long, value_enum)]
    method: Option<MethodName>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    exponent: Option<f64>,
    /// One weight per line.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Components for `pca`: a number, `kaiser`, `weighted_eigenvalue` or `variance:<fraction>`.
    #[arg(long)]
    k: Option<String>,
    /// One coefficient per line.
    #[arg(long)]
    beta: Option<PathBuf>,
    /// Headerless CSV holding the matrix of a custom criterion.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    calibration: CalibrationChoice,
    #[arg(long)]
    calibration_draws: Option<usize>,
    #[arg(long)]
    max_draws: Option<u64>,
}

fn base(command: Command, c: &CommonArgs) -> RunConfig {
    let mut cfg = RunConfig::new(command, c.seed, c.alpha);
    cfg.report = c.report.clone();
    cfg
}

fn with_design(command: Command, a: DesignArgs) -> qfr_core::Result<RunConfig> {
    let mut cfg = base(command, &a.common);
    let method = match (a.method, &a.matrix) {
        (Some(m), Some(_)) if m != MethodName::Custom => {
            return Err(Error::SchemaViolation("--matrix conflicts with a named --method".into()))
        }
        (Some(m), _) => m,
        (None, Some(_)) => MethodName::Custom,
        (None, None) => MethodName::Mahalanobis,
    };
    cfg.covariates = Some(a.covariates);
    cfg.treated_fraction = a.treated_fraction;
    cfg.drop_zero_variance = a.drop_zero_variance;
    cfg.criterion = CriterionSpec {
        method,
        lambda: a.lambda,
        exponent: a.exponent,
        weights: a.weights,
        k: a.k,
        beta: a.beta,
        matrix: a.matrix,
    };
    cfg.calibration = a.calibration;
    if let Some(v) = a.calibration_draws {
        cfg.calibration_draws = v;
    }
    if let Some(v) = a.max_draws {
        cfg.max_draws = v;
    }
    Ok(cfg)
}

fn resolve(sub: Sub) -> qfr_core::Result<(RunConfig, bool)> {
    let (cfg, emit) = match sub {
        Sub::Calibrate(a) => {
            let emit = a.common.emit_config;
            (with_design(Command::Calibrate, a)?, emit)
        }
        Sub::Assign { design, output } => {
            let emit = design.common.emit_config;
            let mut cfg = with_design(Command::Assign, design)?;
            cfg.output = output;
            (cfg, emit)
        }
        Sub::Diagnose { design, assignment, outcomes, nu_draws } => {
            let emit = design.common.emit_config;
            let mut cfg = with_design(Command::Diagnose, design)?;
            cfg.assignment = assignment;
            cfg.outcomes = outcomes;
            if let Some(v) = nu_draws {
                cfg.nu_draws = v;
            }
            (cfg, emit)
        }
        Sub::Infer { design, assignment, outcomes, inference, reference_draws, law_draws, level } => {
            let emit = design.common.emit_config;
            let mut cfg = with_design(Command::Infer, design)?;
            cfg.assignment = Some(assignment);
            cfg.outcomes = Some(outcomes);
            cfg.inference = inference;
            cfg.reference_draws = reference_draws;
            cfg.law_draws = law_draws;
            cfg.level = level;
            (cfg, emit)
        }
        Sub::Simulate { common, study, output } => {
            let mut cfg = base(Command::Simulate, &common);
            cfg.study = Some(study);
            cfg.output = output;
            (cfg, common.emit_config)
        }
        Sub::Run { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::FileNotFound(config.clone()),
                _ => Error::Io(e),
            })?;
            (RunConfig::from_json(&text)?, false)
        }
    };
    cfg.validate()?;
    Ok((cfg, emit))
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message, "exit_code": code }));
    ExitCode::from(code)
}

fn execute(sub: Sub) -> qfr_core::Result<()> {
    let (cfg, emit) = resolve(sub)?;
    let mut stdout = std::io::stdout().lock();
    if emit {
        stdout.write_all(qfr_core::report::to_json(&cfg)?.as_bytes())?;
        return Ok(());
    }
    let out = run(&cfg)?;
    let mut table_on_stdout = false;
    if let Some(table) = &out.table {
        match &cfg.output {
            Some(path) => std::fs::write(path, table)?,
            None => {
                stdout.write_all(table.as_bytes())?;
                table_on_stdout = true;
            }
        }
    }
    match &cfg.report {
        Some(path) => std::fs::write(path, &out.report)?,
        None if !table_on_stdout => stdout.write_all(out.report.as_bytes())?,
        None => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => {
                    fail("UnknownFlag", e.render().to_string().lines().next().unwrap_or_default().to_string(), 2)
                }
                _ => fail("UsageError", e.render().to_string().lines().next().unwrap_or_default().to_string(), 2),
            };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            return fail("ThreadPool", e.to_string(), 2);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), if e.is_numeric() { 3 } else { 2 }),
    }
}
