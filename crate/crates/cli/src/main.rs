//! `hetgroups`: fit latent-group panel models, test for slope heterogeneity,
//! select the number of groups and run the Monte Carlo tables.
//!
//! Exit status: 0 success, 2 input error, 3 numeric failure, 4 partial
//! simulation.

mod commands;
mod config;
mod outcome;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hetgroups::estimators::DEFAULT_FOLDS;
use hetgroups::hettest::TestKind;
use hetgroups::selection::{SelectionMethod, DEFAULT_B_REFS};
use hetgroups::EstimatorTag;

use commands::{FitSettings, SelectInputs, TestInputs, DEFAULT_K_MAX};
use config::{KChoice, LambdaChoice, RunFile, RunSettings};
use outcome::{CliError, CliResult, Stage};

#[derive(Debug, Parser)]
#[command(name = "hetgroups", version, about = "Latent group structure in heterogeneous linear panels")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate group centers, memberships and unit slopes.
    Fit(FitArgs),
    /// Cross-sectional and within-group heterogeneity tests.
    Test(TestArgs),
    /// Choose the number of groups from unit OLS slopes.
    SelectK(SelectArgs),
    /// Run a Monte Carlo configuration and write the summary tables.
    Simulate(SimArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` run file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $HETGROUPS_OUT_DIR, else ./hetgroups-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Long-format CSV with header `unit,time,y,x1,...,xp`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// z-score y and each covariate before the within transform.
    #[arg(long)]
    standardize: bool,
}

#[derive(Debug, Args)]
struct FitParams {
    /// SSP, Km, H-SSP or F-Km.
    #[arg(long)]
    method: Option<String>,
    /// Number of groups, or `auto` for the gap statistic.
    #[arg(long)]
    k: Option<String>,
    /// Penalty level, or `cv` for time-block cross-validation.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    /// Largest K on the `auto` grid.
    #[arg(long)]
    k_max: Option<usize>,
    /// Reference draws for the gap statistic.
    #[arg(long)]
    b_refs: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    params: FitParams,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    params: FitParams,
    /// Directory holding `centers.csv` and `assignment.csv` from an earlier fit.
    #[arg(long)]
    fit_dir: Option<PathBuf>,
    /// s, r or both.
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// gap, silhouette, ch or db.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    b_refs: Option<usize>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Replications per cell and regime.
    #[arg(long)]
    reps: Option<usize>,
}

fn fit_settings(params: &FitParams, file: &RunFile, seed: Option<u64>, default_method: EstimatorTag) -> CliResult<FitSettings> {
    let method = match params.method.clone().or_else(|| file.method.clone()) {
        Some(m) => m.parse::<EstimatorTag>().input("--method")?,
        None => default_method,
    };
    if !matches!(method, EstimatorTag::Classo | EstimatorTag::KmeansLasso | EstimatorTag::Hssp | EstimatorTag::FeasibleKmeans) {
        return Err(CliError::input(format!("--method must be SSP, Km, H-SSP or F-Km, got {method}")));
    }
    let k = params.k.clone().or_else(|| file.k.as_ref().map(|v| v.text())).map_or(Ok(KChoice::Auto), |s| s.parse())?;
    let lambda = params.lambda.clone().or_else(|| file.lambda.as_ref().map(|v| v.text())).map_or(Ok(LambdaChoice::Cv), |s| s.parse())?;
    Ok(FitSettings {
        method,
        k,
        lambda,
        folds: params.folds.or(file.folds).unwrap_or(DEFAULT_FOLDS),
        k_max: params.k_max.or(file.k_max).unwrap_or(DEFAULT_K_MAX),
        b_refs: params.b_refs.or(file.b_refs).unwrap_or(DEFAULT_B_REFS),
        seed: seed.or(file.seed).unwrap_or(0),
    })
}

fn data_path(args: &DataArgs, file: &RunFile) -> CliResult<PathBuf> {
    args.data.clone().or_else(|| file.data.clone()).ok_or_else(|| CliError::input("a data file is required (--data or `data` in the config)"))
}

fn parse_kinds(s: &str) -> CliResult<Vec<TestKind>> {
    match s.to_ascii_lowercase().as_str() {
        "both" | "all" => Ok(vec![TestKind::S, TestKind::R]),
        other => Ok(vec![other.parse::<TestKind>().input("--kind")?]),
    }
}

fn init_runtime(run: &RunSettings, cli: &Cli) -> CliResult<()> {
    let level = cli.log_level.clone().or_else(|| run.log_level.clone()).unwrap_or_else(|| "warn".into());
    let filter = level.parse::<log::LevelFilter>().map_err(|_| CliError::input(format!("unknown log level `{level}`")))?;
    env_logger::Builder::new().filter_level(filter).format_timestamp(None).init();
    if let Some(jobs) = cli.jobs.or(run.jobs) {
        if jobs == 0 {
            return Err(CliError::input("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().input("thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => {
            let file = config::load_run_file(a.common.config.as_deref())?;
            init_runtime(&RunSettings { out_dir: None, jobs: file.jobs, log_level: file.log_level.clone() }, &cli)?;
            let settings = fit_settings(&a.params, &file, a.common.seed, EstimatorTag::KmeansLasso)?;
            let out = config::resolve_out_dir(a.common.out_dir.clone(), file.out_dir.clone());
            let path = data_path(&a.data, &file)?;
            commands::cmd_fit(&path, a.data.standardize || file.standardize.unwrap_or(false), &settings, &out)
        }
        Command::Test(a) => {
            let file = config::load_run_file(a.common.config.as_deref())?;
            init_runtime(&RunSettings { out_dir: None, jobs: file.jobs, log_level: file.log_level.clone() }, &cli)?;
            let settings = fit_settings(&a.params, &file, a.common.seed, EstimatorTag::FeasibleKmeans)?;
            let out = config::resolve_out_dir(a.common.out_dir.clone(), file.out_dir.clone());
            let path = data_path(&a.data, &file)?;
            let kinds = parse_kinds(a.kind.as_deref().or(file.kind.as_deref()).unwrap_or("both"))?;
            let inputs = TestInputs {
                data_path: &path,
                standardize: a.data.standardize || file.standardize.unwrap_or(false),
                fit_dir: a.fit_dir.clone().or_else(|| file.fit_dir.clone()),
                kinds,
            };
            commands::cmd_test(&inputs, &settings, &out)
        }
        Command::SelectK(a) => {
            let file = config::load_run_file(a.common.config.as_deref())?;
            init_runtime(&RunSettings { out_dir: None, jobs: file.jobs, log_level: file.log_level.clone() }, &cli)?;
            let method = match a.method.clone().or_else(|| file.method.clone()) {
                Some(m) => m.parse::<SelectionMethod>().input("--method")?,
                None => SelectionMethod::Gap,
            };
            let path = data_path(&a.data, &file)?;
            let inputs = SelectInputs {
                data_path: &path,
                standardize: a.data.standardize || file.standardize.unwrap_or(false),
                method,
                k_max: a.k_max.or(file.k_max).unwrap_or(DEFAULT_K_MAX),
                b_refs: a.b_refs.or(file.b_refs).unwrap_or(DEFAULT_B_REFS),
                seed: a.common.seed.or(file.seed).unwrap_or(0),
            };
            let out = config::resolve_out_dir(a.common.out_dir.clone(), file.out_dir.clone());
            commands::cmd_select_k(&inputs, &out)
        }
        Command::Simulate(a) => {
            let path = a.common.config.as_deref().ok_or_else(|| CliError::input("simulate requires --config"))?;
            let (mut sim, run) = config::load_sim_file(path)?;
            init_runtime(&run, &cli)?;
            if let Some(reps) = a.reps {
                sim.reps = reps;
            }
            if let Some(seed) = a.common.seed {
                sim.master_seed = seed;
            }
            let out = config::resolve_out_dir(a.common.out_dir.clone(), run.out_dir.clone());
            commands::cmd_simulate(&sim, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
