//! Monte Carlo harness: data generation, replication, aggregation and table
//! output.
//!
//! Replication `r` of cell `c` uses the seed
//! `derive_seed(derive_seed(master_seed, c), r)`. Both regimes share it, so
//! the homogeneous and heterogeneous panels of a replication differ only in
//! the scale of the slope deviations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{feasible_kmeans, rand_index, Centers, GroupAssignment, PointSet};
use crate::error::{Error, Result};
use crate::estimators::{cross_validate_lambda_with, penalized_fit, FitResult, OptimOptions, PenalizedMethod, DEFAULT_FOLDS};
use crate::hettest::{heterogeneity_test, within_group_tests, GroupTest, TestKind};
use crate::panel::{residuals_from_centers, unit_ols, within_transform, CoefficientMatrix, EstimatorTag, PanelData};
use crate::rng::{derive_seed, stream};
use crate::selection::{gap_statistic, index_select, SelectionMethod, DEFAULT_B_REFS};

/// Slope regime of a simulated panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Slopes equal their group center.
    Null,
    /// Slopes deviate from the center by `N(0, eta_variance)` draws.
    Alternative,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Null => "null",
            Regime::Alternative => "alternative",
        }
    }
}

/// A heterogeneity test run inside the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimTest {
    #[serde(rename = "s")]
    S,
    #[serde(rename = "r")]
    R,
    #[serde(rename = "s-wg")]
    SWithin,
    #[serde(rename = "r-wg")]
    RWithin,
}

impl SimTest {
    pub fn label(self) -> &'static str {
        match self {
            SimTest::S => "s",
            SimTest::R => "r",
            SimTest::SWithin => "s-wg",
            SimTest::RWithin => "r-wg",
        }
    }

    pub fn kind(self) -> TestKind {
        match self {
            SimTest::S | SimTest::SWithin => TestKind::S,
            SimTest::R | SimTest::RWithin => TestKind::R,
        }
    }

    pub fn within_group(self) -> bool {
        matches!(self, SimTest::SWithin | SimTest::RWithin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_units: usize,
    pub n_periods: usize,
    /// Extra `[N, T]` cells; when empty the single cell `(n_units, n_periods)` is run.
    pub cells: Vec<[usize; 2]>,
    pub n_covariates: usize,
    pub k_true: usize,
    /// One row per group.
    pub centers_true: Vec<Vec<f64>>,
    pub eta_variance: f64,
    pub noise_variance: f64,
    pub reps: usize,
    pub master_seed: u64,
    pub regimes: Vec<Regime>,
    pub estimators: Vec<EstimatorTag>,
    pub tests: Vec<SimTest>,
    pub selection: Vec<SelectionMethod>,
    pub alpha_level: f64,
    pub k_max: usize,
    pub b_refs: usize,
    pub folds: usize,
    /// Fixed tuning parameter; cross-validated when absent.
    pub lambda: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_units: 100,
            n_periods: 100,
            cells: Vec::new(),
            n_covariates: 1,
            k_true: 2,
            centers_true: vec![vec![0.5], vec![2.0]],
            eta_variance: 0.2,
            noise_variance: 1.0,
            reps: 200,
            master_seed: 0,
            regimes: vec![Regime::Null, Regime::Alternative],
            estimators: vec![EstimatorTag::Classo, EstimatorTag::KmeansLasso, EstimatorTag::FeasibleKmeans, EstimatorTag::Hssp],
            tests: vec![SimTest::S, SimTest::R, SimTest::SWithin, SimTest::RWithin],
            selection: vec![SelectionMethod::Gap],
            alpha_level: 0.05,
            k_max: 5,
            b_refs: DEFAULT_B_REFS,
            folds: DEFAULT_FOLDS,
            lambda: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.k_true == 0 || self.centers_true.len() != self.k_true {
            return bad("centers_true must have k_true rows");
        }
        if self.n_covariates == 0 || self.centers_true.iter().any(|r| r.len() != self.n_covariates) {
            return bad("every center needs n_covariates entries");
        }
        if self.centers_true.iter().flatten().any(|v| !v.is_finite()) {
            return bad("centers must be finite");
        }
        if self.centers_true.iter().tuple_combinations().any(|(a, b)| a == b) {
            return bad("centers_true rows must be distinct");
        }
        if self.eta_variance.is_nan() || self.eta_variance < 0.0 || self.noise_variance.is_nan() || self.noise_variance < 0.0 {
            return bad("variances must be nonnegative");
        }
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return bad("alpha_level must lie in (0, 1)");
        }
        if self.k_max == 0 || self.b_refs == 0 {
            return bad("k_max and b_refs must be positive");
        }
        if let Some(l) = self.lambda {
            if l.is_nan() || l < 0.0 {
                return bad("lambda must be nonnegative");
            }
        }
        for &[n, t] in &self.cell_list() {
            if n < self.k_true || n < 2 || t < 3 {
                return bad("each cell needs N >= max(2, k_true) and T >= 3");
            }
        }
        for e in &self.estimators {
            if matches!(e, EstimatorTag::UnitOls | EstimatorTag::Truth) {
                return bad("estimators must be SSP, Km, F-Km or H-SSP");
            }
        }
        Ok(())
    }

    pub fn cell_list(&self) -> Vec<[usize; 2]> {
        if self.cells.is_empty() {
            vec![[self.n_units, self.n_periods]]
        } else {
            self.cells.clone()
        }
    }

    pub fn rep_seed(&self, cell: usize, rep: usize) -> u64 {
        derive_seed(derive_seed(self.master_seed, cell as u64), rep as u64)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRecord {
    pub beta_true: CoefficientMatrix,
    pub assignment_true: GroupAssignment,
    pub centers_true: Centers,
}

/// Contiguous group blocks of `floor(N/K)` units, remainder to the last group.
pub fn block_labels(n: usize, k: usize) -> Vec<usize> {
    let size = n / k;
    (0..n).map(|i| i.checked_div(size).map_or(0, |g| g.min(k - 1))).collect()
}

/// Raw (not demeaned) panel for one replication.
pub fn generate_dgp(config: &SimConfig, n: usize, t_len: usize, regime: Regime, seed: u64) -> Result<(PanelData, TruthRecord)> {
    let (k, p) = (config.k_true, config.n_covariates);
    let mut rng = stream(seed);
    let labels = block_labels(n, k);
    let eta_sd = match regime {
        Regime::Null => 0.0,
        Regime::Alternative => config.eta_variance.sqrt(),
    };
    let noise_sd = config.noise_variance.sqrt();
    let centers = DMatrix::from_fn(k, p, |r, c| config.centers_true[r][c]);
    let mut beta = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            let z: f64 = rng.sample(StandardNormal);
            beta[(i, j)] = centers[(labels[i], j)] + eta_sd * z;
        }
    }
    let mut y = Vec::with_capacity(n * t_len);
    let mut x = Vec::with_capacity(n * t_len * p);
    for i in 0..n {
        for _ in 0..t_len {
            let mut fit = 0.0;
            for j in 0..p {
                let v: f64 = rng.sample(StandardNormal);
                fit += beta[(i, j)] * v;
                x.push(v);
            }
            let e: f64 = rng.sample(StandardNormal);
            y.push(fit + noise_sd * e);
        }
    }
    let data = PanelData::new(n, t_len, p, y, x)?;
    Ok((
        data,
        TruthRecord {
            beta_true: CoefficientMatrix::new(beta, EstimatorTag::Truth),
            assignment_true: GroupAssignment::from_labels(labels, k),
            centers_true: Centers::new(centers),
        },
    ))
}

/// Mean squared error over units and covariates.
pub fn mse(beta_hat: &CoefficientMatrix, truth: &TruthRecord) -> Result<f64> {
    let a = &beta_hat.beta;
    let b = &truth.beta_true.beta;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a - b).iter().map(|d| d * d).sum::<f64>() / a.len() as f64)
}

/// `perm[k]` is the estimated center matched to true center `k`, chosen to
/// minimize the summed Euclidean distance over all injective matchings.
pub fn align_centers(estimated: &Centers, truth: &Centers) -> Result<Vec<usize>> {
    let (ke, kt) = (estimated.k(), truth.k());
    if ke < kt || estimated.n_covariates() != truth.n_covariates() {
        return Err(Error::ShapeMismatch(format!("cannot align {ke} estimated centers to {kt} true ones")));
    }
    let cost = |e: usize, t: usize| (estimated.row(e) - truth.row(t)).norm();
    if ke <= 6 {
        let best = (0..ke)
            .permutations(kt)
            .map(|perm| {
                let c: f64 = perm.iter().enumerate().map(|(t, &e)| cost(e, t)).sum();
                (c, perm)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one matching");
        return Ok(best.1);
    }
    let mut used = vec![false; ke];
    let mut perm = Vec::with_capacity(kt);
    for t in 0..kt {
        let e = (0..ke).filter(|&e| !used[e]).min_by(|&a, &b| cost(a, t).total_cmp(&cost(b, t))).expect("free center");
        used[e] = true;
        perm.push(e);
    }
    Ok(perm)
}

/// Squared error of the estimate matched to the first true center, averaged
/// over covariates.
pub fn first_center_mse(estimated: &Centers, truth: &Centers) -> Result<f64> {
    let perm = align_centers(estimated, truth)?;
    let d = estimated.row(perm[0]) - truth.row(0);
    Ok(d.norm_squared() / d.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOutcome {
    pub mse_beta: f64,
    pub mse_alpha1: f64,
    pub rand_index: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepOutcome {
    /// Aligned with `SimConfig::estimators`; `None` marks a failed fit.
    pub estimators: Vec<Option<EstimatorOutcome>>,
    /// Rejection share (0/1 cross-sectionally, fraction of tested groups within).
    pub tests: Vec<Option<f64>>,
    pub selected_k: Vec<Option<usize>>,
}

fn fit_estimator(config: &SimConfig, data: &PanelData, tag: EstimatorTag, seed: u64) -> Result<FitResult> {
    let opts = OptimOptions { seed, ..OptimOptions::default() };
    if tag == EstimatorTag::FeasibleKmeans {
        return feasible_kmeans(data, config.k_true, seed);
    }
    let method = PenalizedMethod::from_tag(tag)?;
    let lambda = match config.lambda {
        Some(l) => l,
        None => cross_validate_lambda_with(data, config.k_true, tag, config.folds, &opts)?.selected_lambda,
    };
    penalized_fit(data, config.k_true, lambda, method, &opts)
}

fn score_fit(fit: &FitResult, truth: &TruthRecord) -> Result<EstimatorOutcome> {
    Ok(EstimatorOutcome {
        mse_beta: mse(&fit.beta, truth)?,
        mse_alpha1: first_center_mse(&fit.centers, &truth.centers_true)?,
        rand_index: rand_index(&fit.assignment, &truth.assignment_true)?,
        lambda: fit.lambda,
    })
}

fn run_tests(config: &SimConfig, data: &PanelData, seed: u64) -> Result<Vec<Option<f64>>> {
    if config.tests.is_empty() {
        return Ok(Vec::new());
    }
    let fkm = feasible_kmeans(data, config.k_true, seed)?;
    let residuals = residuals_from_centers(data, &fkm.centers, &fkm.assignment)?;
    Ok(config
        .tests
        .iter()
        .map(|test| {
            if test.within_group() {
                let groups = within_group_tests(data, &fkm, test.kind()).ok()?;
                let tested: Vec<bool> = groups.iter().filter_map(GroupTest::result).map(|r| r.rejects(config.alpha_level)).collect();
                (!tested.is_empty()).then(|| tested.iter().filter(|&&r| r).count() as f64 / tested.len() as f64)
            } else {
                let r = heterogeneity_test(data, &residuals, test.kind()).ok()?;
                Some(if r.rejects(config.alpha_level) { 1.0 } else { 0.0 })
            }
        })
        .collect())
}

fn run_selection(config: &SimConfig, data: &PanelData, seed: u64) -> Result<Vec<Option<usize>>> {
    if config.selection.is_empty() {
        return Ok(Vec::new());
    }
    let points = PointSet::from_coefficients(&unit_ols(data)?)?;
    let k_max = config.k_max.min(points.len() - 1);
    Ok(config
        .selection
        .iter()
        .map(|&m| match m {
            SelectionMethod::Gap => gap_statistic(&points, k_max, config.b_refs, seed).ok().map(|g| g.selected_k),
            other => index_select(&points, other, k_max, seed).ok().map(|s| s.selected_k),
        })
        .collect())
}

/// One replication of one cell and regime.
pub fn replicate(config: &SimConfig, n: usize, t_len: usize, regime: Regime, seed: u64) -> Result<RepOutcome> {
    let (raw, truth) = generate_dgp(config, n, t_len, regime, seed)?;
    let data = within_transform(&raw)?;
    let fit_seed = derive_seed(seed, 1);
    let estimators = config
        .estimators
        .iter()
        .map(|&tag| match fit_estimator(config, &data, tag, fit_seed).and_then(|f| score_fit(&f, &truth)) {
            Ok(o) => Some(o),
            Err(e) => {
                log::warn!("{tag} failed (N={n}, T={t_len}, seed {seed}): {e}");
                None
            }
        })
        .collect();
    let tests = run_tests(config, &data, fit_seed).unwrap_or_else(|_| vec![None; config.tests.len()]);
    let selected_k = run_selection(config, &data, derive_seed(seed, 2)).unwrap_or_else(|_| vec![None; config.selection.len()]);
    Ok(RepOutcome { estimators, tests, selected_k })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRow {
    pub n_units: usize,
    pub n_periods: usize,
    pub regime: Regime,
    pub estimator: EstimatorTag,
    pub mse_beta: f64,
    pub mse_alpha1: f64,
    pub rand_index: f64,
    pub mean_lambda: f64,
    pub reps_completed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestRow {
    pub n_units: usize,
    pub n_periods: usize,
    pub regime: Regime,
    pub test: SimTest,
    pub rejection_rate: f64,
    pub reps_completed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub n_units: usize,
    pub n_periods: usize,
    pub regime: Regime,
    pub method: SelectionMethod,
    /// `counts[k - 1]` replications selected `k`.
    pub counts: Vec<usize>,
    pub reps_completed: usize,
}

impl SelectionRow {
    pub fn frequency(&self, k: usize) -> f64 {
        if self.reps_completed == 0 || k == 0 || k > self.counts.len() {
            return 0.0;
        }
        self.counts[k - 1] as f64 / self.reps_completed as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub config: SimConfig,
    pub reps: usize,
    pub estimators: Vec<EstimatorRow>,
    pub tests: Vec<TestRow>,
    pub selection: Vec<SelectionRow>,
}

impl MetricsTable {
    pub fn estimator(&self, n: usize, t: usize, regime: Regime, tag: EstimatorTag) -> Option<&EstimatorRow> {
        self.estimators.iter().find(|r| (r.n_units, r.n_periods, r.regime, r.estimator) == (n, t, regime, tag))
    }

    pub fn test(&self, n: usize, t: usize, regime: Regime, test: SimTest) -> Option<&TestRow> {
        self.tests.iter().find(|r| (r.n_units, r.n_periods, r.regime, r.test) == (n, t, regime, test))
    }

    pub fn selection_row(&self, n: usize, t: usize, regime: Regime, method: SelectionMethod) -> Option<&SelectionRow> {
        self.selection.iter().find(|r| (r.n_units, r.n_periods, r.regime, r.method) == (n, t, regime, method))
    }

    /// Smallest completed-replication count over all rows.
    pub fn min_reps_completed(&self) -> usize {
        let e = self.estimators.iter().map(|r| r.reps_completed);
        let t = self.tests.iter().map(|r| r.reps_completed);
        let s = self.selection.iter().map(|r| r.reps_completed);
        e.chain(t).chain(s).min().unwrap_or(self.reps)
    }

    /// True when some row completed fewer than 90% of the replications.
    pub fn is_partial(&self) -> bool {
        (self.min_reps_completed() as f64) < 0.9 * self.reps as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut s = 0.0;
    let mut c = 0;
    for v in values {
        s += v;
        c += 1;
    }
    (if c > 0 { s / c as f64 } else { f64::NAN }, c)
}

fn aggregate(config: &SimConfig, n: usize, t: usize, regime: Regime, outcomes: &[Option<RepOutcome>], table: &mut MetricsTable) {
    let ok: Vec<&RepOutcome> = outcomes.iter().flatten().collect();
    for (e, &tag) in config.estimators.iter().enumerate() {
        let vals: Vec<EstimatorOutcome> = ok.iter().filter_map(|o| o.estimators[e]).collect();
        table.estimators.push(EstimatorRow {
            n_units: n,
            n_periods: t,
            regime,
            estimator: tag,
            mse_beta: mean(vals.iter().map(|v| v.mse_beta)).0,
            mse_alpha1: mean(vals.iter().map(|v| v.mse_alpha1)).0,
            rand_index: mean(vals.iter().map(|v| v.rand_index)).0,
            mean_lambda: mean(vals.iter().map(|v| v.lambda)).0,
            reps_completed: vals.len(),
        });
    }
    for (j, &test) in config.tests.iter().enumerate() {
        let (rate, count) = mean(ok.iter().filter_map(|o| o.tests[j]));
        table.tests.push(TestRow {
            n_units: n,
            n_periods: t,
            regime,
            test,
            rejection_rate: rate,
            reps_completed: count,
        });
    }
    for (j, &method) in config.selection.iter().enumerate() {
        let picks: Vec<usize> = ok.iter().filter_map(|o| o.selected_k[j]).collect();
        let mut counts = vec![0; config.k_max];
        for &k in &picks {
            counts[k - 1] += 1;
        }
        table.selection.push(SelectionRow {
            n_units: n,
            n_periods: t,
            regime,
            method,
            counts,
            reps_completed: picks.len(),
        });
    }
}

/// Runs every cell and regime; replications execute on the current rayon
/// pool and are aggregated in index order, so results do not depend on the
/// degree of parallelism.
pub fn run_replications(config: &SimConfig) -> Result<MetricsTable> {
    config.validate()?;
    let mut table = MetricsTable {
        config: config.clone(),
        reps: config.reps,
        estimators: Vec::new(),
        tests: Vec::new(),
        selection: Vec::new(),
    };
    for (c, [n, t]) in config.cell_list().into_iter().enumerate() {
        for &regime in &config.regimes {
            let outcomes: Vec<Option<RepOutcome>> = (0..config.reps)
                .into_par_iter()
                .map(|r| match replicate(config, n, t, regime, config.rep_seed(c, r)) {
                    Ok(o) => Some(o),
                    Err(e) => {
                        log::warn!("replication {r} failed: {e}");
                        None
                    }
                })
                .collect();
            aggregate(config, n, t, regime, &outcomes, &mut table);
        }
    }
    Ok(table)
}

pub const TABLE_FILES: [&str; 8] = [
    "table1_beta_mse.csv",
    "table2_alpha_mse.csv",
    "table3_rand.csv",
    "table4_gapfreq.csv",
    "table5_s_test.csv",
    "table6_r_test.csv",
    "table7_k2.csv",
    "table8_k1.csv",
];
pub const DIGEST_FILE: &str = "digest.md";
pub const MANIFEST_FILE: &str = "manifest.toml";

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn estimator_rows(table: &MetricsTable, value: impl Fn(&EstimatorRow) -> f64) -> Vec<Vec<String>> {
    table
        .estimators
        .iter()
        .map(|r| {
            vec![
                r.n_units.to_string(),
                r.n_periods.to_string(),
                r.regime.label().to_string(),
                r.estimator.label().to_string(),
                fmt_f(value(r)),
                r.reps_completed.to_string(),
                table.reps.to_string(),
            ]
        })
        .collect()
}

fn test_rows(table: &MetricsTable, kind: TestKind) -> Vec<Vec<String>> {
    table
        .tests
        .iter()
        .filter(|r| r.test.kind() == kind)
        .map(|r| {
            vec![
                r.n_units.to_string(),
                r.n_periods.to_string(),
                r.regime.label().to_string(),
                if r.test.within_group() { "wg" } else { "cs" }.to_string(),
                fmt_f(r.rejection_rate),
                table.config.alpha_level.to_string(),
                r.reps_completed.to_string(),
                table.reps.to_string(),
            ]
        })
        .collect()
}

fn selection_rows(table: &MetricsTable, target: usize, only_gap: bool) -> Vec<Vec<String>> {
    table
        .selection
        .iter()
        .filter(|r| !only_gap || r.method == SelectionMethod::Gap)
        .map(|r| {
            vec![
                r.n_units.to_string(),
                r.n_periods.to_string(),
                r.regime.label().to_string(),
                r.method.label().to_string(),
                target.to_string(),
                fmt_f(if r.reps_completed > 0 { r.frequency(target) } else { f64::NAN }),
                r.reps_completed.to_string(),
                table.reps.to_string(),
            ]
        })
        .collect()
}

/// Writes the eight table CSVs, the markdown digest and the manifest.
pub fn write_tables(table: &MetricsTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let est_header = |col: &'static str| ["n_units", "n_periods", "regime", "estimator", col, "reps_completed", "reps"];
    let test_header = ["n_units", "n_periods", "regime", "scope", "rejection_rate", "alpha_level", "reps_completed", "reps"];
    let sel_header = ["n_units", "n_periods", "regime", "method", "target_k", "frequency", "reps_completed", "reps"];
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let path = out_dir.join(name);
        write_csv(&path, header, rows)?;
        written.push(path);
        Ok(())
    };
    emit(TABLE_FILES[0], &est_header("mse_beta"), estimator_rows(table, |r| r.mse_beta))?;
    emit(TABLE_FILES[1], &est_header("mse_alpha1"), estimator_rows(table, |r| r.mse_alpha1))?;
    emit(TABLE_FILES[2], &est_header("rand_index"), estimator_rows(table, |r| r.rand_index))?;
    emit(TABLE_FILES[3], &sel_header, selection_rows(table, table.config.k_true, true))?;
    emit(TABLE_FILES[4], &test_header, test_rows(table, TestKind::S))?;
    emit(TABLE_FILES[5], &test_header, test_rows(table, TestKind::R))?;
    emit(TABLE_FILES[6], &sel_header, selection_rows(table, 2, false))?;
    emit(TABLE_FILES[7], &sel_header, selection_rows(table, 1, false))?;

    let digest = out_dir.join(DIGEST_FILE);
    std::fs::write(&digest, digest_markdown(table))?;
    written.push(digest);
    let manifest = out_dir.join(MANIFEST_FILE);
    std::fs::write(&manifest, table.config.to_toml())?;
    written.push(manifest);
    Ok(written)
}

/// Human-readable summary of a run.
pub fn digest_markdown(table: &MetricsTable) -> String {
    let mut s = String::new();
    let c = &table.config;
    let _ = writeln!(s, "# Simulation digest\n");
    let _ = writeln!(s, "master_seed = {}, reps = {}, k_true = {}, eta_variance = {}\n", c.master_seed, table.reps, c.k_true, c.eta_variance);
    if !table.estimators.is_empty() {
        let _ = writeln!(s, "## Estimators\n");
        let _ = writeln!(s, "| N | T | regime | estimator | MSE(beta) | MSE(alpha1) | Rand | mean lambda | reps |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
        for r in &table.estimators {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.4} | {:.4} | {:.3} | {:.4} | {} |",
                r.n_units,
                r.n_periods,
                r.regime.label(),
                r.estimator,
                r.mse_beta,
                r.mse_alpha1,
                r.rand_index,
                r.mean_lambda,
                r.reps_completed
            );
        }
        s.push('\n');
    }
    if !table.tests.is_empty() {
        let _ = writeln!(s, "## Heterogeneity tests (level {})\n", c.alpha_level);
        let _ = writeln!(s, "| N | T | regime | test | rejection rate | reps |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        for r in &table.tests {
            let _ = writeln!(s, "| {} | {} | {} | {} | {:.3} | {} |", r.n_units, r.n_periods, r.regime.label(), r.test.label(), r.rejection_rate, r.reps_completed);
        }
        s.push('\n');
    }
    if !table.selection.is_empty() {
        let _ = writeln!(s, "## Number of groups\n");
        let _ = writeln!(s, "| N | T | regime | method | P(K=1) | P(K=2) | P(K=k_true) | reps |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        for r in &table.selection {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.3} | {:.3} | {:.3} | {} |",
                r.n_units,
                r.n_periods,
                r.regime.label(),
                r.method,
                r.frequency(1),
                r.frequency(2),
                r.frequency(c.k_true),
                r.reps_completed
            );
        }
    }
    s
}
