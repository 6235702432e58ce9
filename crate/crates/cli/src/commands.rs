use std::path::{Path, PathBuf};

use log::info;

use hetgroups::estimators::{cross_validate_lambda_with, penalized_fit, CvReport, FitResult, OptimOptions, PenalizedMethod};
use hetgroups::hettest::{heterogeneity_test, within_group_tests_with, GroupTest, TestKind, TestResult};
use hetgroups::io::{self, TestSection};
use hetgroups::panel::residuals_from_centers;
use hetgroups::selection::{gap_statistic, index_select, GapResult, SelectionMethod};
use hetgroups::sim::{run_replications, write_tables, SimConfig};
use hetgroups::{feasible_kmeans, unit_ols, within_transform, EstimatorTag, Error, PanelData, PointSet};

use crate::config::{KChoice, LambdaChoice};
use crate::outcome::{CliError, CliResult, Stage, EXIT_PARTIAL};

/// Largest K tried when `--k auto` or `select-k` is used without `--k-max`.
pub const DEFAULT_K_MAX: usize = 20;

#[derive(Debug, Clone)]
pub struct FitSettings {
    pub method: EstimatorTag,
    pub k: KChoice,
    pub lambda: LambdaChoice,
    pub folds: usize,
    pub k_max: usize,
    pub b_refs: usize,
    pub seed: u64,
}

/// Loads the raw panel and returns its within-transformed copy.
pub fn load_panel(path: &Path, standardize: bool) -> CliResult<PanelData> {
    let raw = io::read_panel_file(path).input(&format!("loading {}", path.display()))?;
    let raw = if standardize { raw.standardized() } else { raw };
    within_transform(&raw).input("within transform")
}

fn unit_points(data: &PanelData) -> CliResult<PointSet> {
    let beta = unit_ols(data).numeric("unit OLS")?;
    PointSet::from_coefficients(&beta).numeric("unit OLS")
}

fn grid_limit(requested: usize, n: usize) -> CliResult<usize> {
    if n < 2 {
        return Err(CliError::input("K selection needs at least two units"));
    }
    Ok(requested.min(n - 1))
}

struct FitRun {
    fit: FitResult,
    gap: Option<GapResult>,
    cv: Option<CvReport>,
}

fn run_fit(data: &PanelData, s: &FitSettings) -> CliResult<FitRun> {
    let (k, gap) = match s.k {
        KChoice::Fixed(k) => (k, None),
        KChoice::Auto => {
            let points = unit_points(data)?;
            let k_max = grid_limit(s.k_max, points.len())?;
            let gap = gap_statistic(&points, k_max, s.b_refs, s.seed).numeric("selecting K")?;
            info!("gap statistic selected K = {}", gap.selected_k);
            (gap.selected_k, Some(gap))
        }
    };
    if k > data.n_units() {
        return Err(CliError::input(format!("K = {k} exceeds the number of units ({})", data.n_units())));
    }
    if s.method == EstimatorTag::FeasibleKmeans {
        let fit = feasible_kmeans(data, k, s.seed).numeric("fitting F-Km")?;
        return Ok(FitRun { fit, gap, cv: None });
    }
    let method = PenalizedMethod::from_tag(s.method).input("method")?;
    let opts = OptimOptions { seed: s.seed, ..OptimOptions::default() };
    let (lambda, cv) = match s.lambda {
        LambdaChoice::Fixed(l) => (l, None),
        LambdaChoice::Cv => {
            let cv = cross_validate_lambda_with(data, k, s.method, s.folds, &opts).map_err(|e| match e {
                Error::TooFewPeriods { .. } => CliError::input(format!("cross-validation: {e}")),
                e => CliError::numeric(format!("cross-validation: {e}")),
            })?;
            info!("cross-validation selected lambda = {}", cv.selected_lambda);
            (cv.selected_lambda, Some(cv))
        }
    };
    let fit = penalized_fit(data, k, lambda, method, &opts).numeric(&format!("fitting {}", s.method))?;
    Ok(FitRun { fit, gap, cv })
}

fn write_fit_run(run: &FitRun, data: &PanelData, s: &FitSettings, data_path: &Path, standardize: bool, out: &Path) -> CliResult<String> {
    io::write_fit(&run.fit, data, out).input("writing fit")?;
    if let Some(gap) = &run.gap {
        io::write_gap(gap, &out.join("gap.csv")).input("writing gap.csv")?;
    }
    if let Some(cv) = &run.cv {
        io::write_cv(cv, &out.join("cv.csv")).input("writing cv.csv")?;
    }
    let k_source = match s.k {
        KChoice::Auto => format!("auto (gap statistic, K grid 1..{}, {} reference draws)", run.gap.as_ref().map_or(0, |g| g.k_grid.len()), s.b_refs),
        KChoice::Fixed(_) => "fixed".to_string(),
    };
    let lambda_source = match (s.method, s.lambda) {
        (EstimatorTag::FeasibleKmeans, _) => "unused".to_string(),
        (_, LambdaChoice::Cv) => format!("cv ({} folds)", s.folds),
        (_, LambdaChoice::Fixed(_)) => "fixed".to_string(),
    };
    let summary = format!(
        "{}k_selection = {k_source}\nlambda_selection = {lambda_source}\nseed = {}\nstandardized = {standardize}\ndata = {}\n",
        io::fit_summary(&run.fit),
        s.seed,
        data_path.display()
    );
    std::fs::write(out.join("summary.txt"), &summary).input("writing summary.txt")?;
    Ok(summary)
}

pub fn cmd_fit(data_path: &Path, standardize: bool, s: &FitSettings, out: &Path) -> CliResult<()> {
    let data = load_panel(data_path, standardize)?;
    let run = run_fit(&data, s)?;
    let summary = write_fit_run(&run, &data, s, data_path, standardize, out)?;
    print!("{summary}");
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn cross_test(data: &PanelData, residuals: &hetgroups::panel::ResidualMatrix, group_of: &[usize], kind: TestKind) -> CliResult<TestResult> {
    heterogeneity_test(data, residuals, kind).map_err(|e| match e {
        Error::DegenerateResiduals(i) => CliError::numeric(format!(
            "{}-test: degenerate residuals for unit `{}` in group {}",
            kind.label(),
            data.unit_labels()[i],
            group_of[i] + 1
        )),
        e => CliError::numeric(format!("{}-test: {e}", kind.label())),
    })
}

pub struct TestInputs<'a> {
    pub data_path: &'a Path,
    pub standardize: bool,
    pub fit_dir: Option<PathBuf>,
    pub kinds: Vec<TestKind>,
}

pub fn cmd_test(inputs: &TestInputs<'_>, s: &FitSettings, out: &Path) -> CliResult<()> {
    let data = load_panel(inputs.data_path, inputs.standardize)?;
    let (centers, assignment) = match &inputs.fit_dir {
        Some(dir) => {
            let centers = io::read_centers(&dir.join("centers.csv")).input("reading centers.csv")?;
            if centers.n_covariates() != data.n_covariates() {
                return Err(CliError::input(format!(
                    "centers.csv has {} covariates but the data has {}",
                    centers.n_covariates(),
                    data.n_covariates()
                )));
            }
            let assignment = io::read_assignment(&dir.join("assignment.csv"), &data, centers.k()).input("reading assignment.csv")?;
            (centers, assignment)
        }
        None => {
            let run = run_fit(&data, s)?;
            write_fit_run(&run, &data, s, inputs.data_path, inputs.standardize, out)?;
            (run.fit.centers, run.fit.assignment)
        }
    };
    let residuals = residuals_from_centers(&data, &centers, &assignment).numeric("group residuals")?;
    let mut blocks: Vec<(TestKind, Vec<TestResult>, Vec<GroupTest>)> = Vec::new();
    for &kind in &inputs.kinds {
        let cross = cross_test(&data, &residuals, &assignment.group_of, kind)?;
        let groups = within_group_tests_with(&data, &residuals, &assignment.group_of, centers.k(), kind).numeric(&format!("within-group {}-test", kind.label()))?;
        blocks.push((kind, vec![cross], groups));
    }
    let sections: Vec<TestSection<'_>> = blocks.iter().map(|(kind, cross, groups)| TestSection { kind: *kind, cross, groups }).collect();
    std::fs::create_dir_all(out).input("creating output directory")?;
    let path = out.join("tests.csv");
    io::write_tests(&sections, &path).input("writing tests.csv")?;
    println!("{:<10} {:<4} {:>12} {:>4} {:>10} {:<4}", "scope", "test", "statistic", "df", "p_value", "");
    for (kind, cross, groups) in &blocks {
        for r in cross.iter().chain(groups.iter().filter_map(GroupTest::result)) {
            println!("{:<10} {:<4} {:>12.4} {:>4} {:>10.4} {:<4}", r.scope.to_string(), r.kind.label(), r.statistic, r.df, r.p_value, r.stars());
        }
        for g in groups {
            if let GroupTest::Skipped { group, size, reason } = g {
                println!("group({}) {:<4} skipped ({size} units): {reason}", group + 1, kind.label());
            }
        }
    }
    println!("results written to {}", path.display());
    Ok(())
}

pub struct SelectInputs<'a> {
    pub data_path: &'a Path,
    pub standardize: bool,
    pub method: SelectionMethod,
    pub k_max: usize,
    pub b_refs: usize,
    pub seed: u64,
}

pub fn cmd_select_k(inputs: &SelectInputs<'_>, out: &Path) -> CliResult<()> {
    let data = load_panel(inputs.data_path, inputs.standardize)?;
    let points = unit_points(&data)?;
    let k_max = grid_limit(inputs.k_max, points.len())?;
    std::fs::create_dir_all(out).input("creating output directory")?;
    let selected = match inputs.method {
        SelectionMethod::Gap => {
            let gap = gap_statistic(&points, k_max, inputs.b_refs, inputs.seed).numeric("gap statistic")?;
            io::write_gap(&gap, &out.join("gap.csv")).input("writing gap.csv")?;
            gap.selected_k
        }
        m => {
            let scores = index_select(&points, m, k_max, inputs.seed).map_err(|e| match e {
                Error::MethodNeedsK2 => CliError::input(format!("{m}: {e}")),
                e => CliError::numeric(format!("{m}: {e}")),
            })?;
            io::write_index_scores(&scores, &out.join("index_scores.csv")).input("writing index_scores.csv")?;
            scores.selected_k
        }
    };
    let text = format!("method = {}\nk_max = {k_max}\nselected_k = {selected}\n", inputs.method);
    std::fs::write(out.join("selected_k.txt"), &text).input("writing selected_k.txt")?;
    print!("{text}");
    Ok(())
}

pub fn cmd_simulate(config: &SimConfig, out: &Path) -> CliResult<()> {
    config.validate().input("simulation config")?;
    let table = run_replications(config).numeric("simulation")?;
    let files = write_tables(&table, out).input("writing tables")?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    if table.is_partial() {
        return Err(CliError {
            code: EXIT_PARTIAL,
            message: format!(
                "partial simulation: at least one cell completed only {} of {} replications",
                table.min_reps_completed(),
                config.reps
            ),
        });
    }
    Ok(())
}
