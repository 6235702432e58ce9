//! Penalized profile-likelihood estimators with a multiplicative
//! classifier-Lasso penalty:
//!
//! ```text
//! Q(beta, alpha) = 1/(NT) sum_i sum_t 1/2 (y_it - beta_i'x_it)^2
//!                + lambda/N sum_i prod_k ||beta_i - alpha_k||
//! ```
//!
//! All three fitters share one block-coordinate descent. The slope block
//! takes proximal-gradient steps unit by unit: the factor of the product
//! belonging to the nearest center is handled by its proximal map (a group
//! soft-threshold toward that center, weighted by the remaining factors),
//! everything else by its gradient. A step is accepted only if it lowers the
//! unit's objective, halving the step size otherwise. The center block is
//! either a weighted geometric-mean (Weiszfeld) update of the penalty
//! (`Classo`, `Hssp`) or a warm-started Lloyd solve on the current slopes
//! (`KmeansLasso`); in both cases the update is kept only if the penalty
//! does not increase, so the recorded objective never goes up.

use nalgebra::{DMatrix, DVector};

use crate::clustering::{classify_rows, kmeans_with, lloyd, Centers, GroupAssignment, KmeansOptions, PointSet};
use crate::error::{Error, Result};
use crate::panel::{unit_ols_moments, CoefficientMatrix, EstimatorTag, PanelData, PanelMoments};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_SMOOTHING: f64 = 1e-8;
pub const DEFAULT_FOLDS: usize = 10;
/// Multipliers of `T^{-1/3}` forming the tuning grid.
pub const LAMBDA_MULTIPLIERS: [f64; 5] = [0.125, 0.25, 0.5, 1.0, 2.0];

const INNER_STEPS: usize = 10;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub smoothing: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            smoothing: DEFAULT_SMOOTHING,
            restarts: crate::clustering::DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

impl OptimOptions {
    fn kmeans(&self) -> KmeansOptions {
        KmeansOptions {
            restarts: self.restarts,
            ..KmeansOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: CoefficientMatrix,
    /// Slopes before they were snapped to their centers (`Classo`, `Hssp`).
    pub pre_snap_beta: Option<CoefficientMatrix>,
    pub centers: Centers,
    pub assignment: GroupAssignment,
    pub lambda: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn tag(&self) -> EstimatorTag {
        self.beta.estimator_tag
    }
}

/// Product of Euclidean distances from `beta_i` to every center.
pub fn penalty(beta_i: &DVector<f64>, centers: &Centers) -> f64 {
    (0..centers.k()).map(|k| dist(beta_i, &centers.alpha, k)).product()
}

fn dist(beta_i: &DVector<f64>, alpha: &DMatrix<f64>, k: usize) -> f64 {
    (0..beta_i.len()).map(|j| (beta_i[j] - alpha[(k, j)]).powi(2)).sum::<f64>().sqrt()
}

/// Gradient of the product penalty with distances floored at the default
/// smoothing level.
pub fn penalty_gradient(beta_i: &DVector<f64>, centers: &Centers) -> DVector<f64> {
    penalty_gradient_with(beta_i, centers, DEFAULT_SMOOTHING)
}

/// `sum_j (beta_i - alpha_j) / max(d_j, floor) * prod_{l != j} d_l`.
pub fn penalty_gradient_with(beta_i: &DVector<f64>, centers: &Centers, floor: f64) -> DVector<f64> {
    let k = centers.k();
    let d: Vec<f64> = (0..k).map(|j| dist(beta_i, &centers.alpha, j)).collect();
    let mut grad = DVector::zeros(beta_i.len());
    for j in 0..k {
        let others: f64 = (0..k).filter(|&l| l != j).map(|l| d[l]).product();
        let scale = others / d[j].max(floor);
        for c in 0..beta_i.len() {
            grad[c] += (beta_i[c] - centers.alpha[(j, c)]) * scale;
        }
    }
    grad
}

fn check_shapes(data: &PanelData, beta: &CoefficientMatrix, centers: &Centers) -> Result<()> {
    if beta.n_units() != data.n_units() || beta.n_covariates() != data.n_covariates() {
        return Err(Error::ShapeMismatch(format!(
            "beta is {}x{}, panel is {}x{}",
            beta.n_units(),
            beta.n_covariates(),
            data.n_units(),
            data.n_covariates()
        )));
    }
    if centers.n_covariates() != data.n_covariates() || centers.k() == 0 {
        return Err(Error::ShapeMismatch("centers do not match covariate count".into()));
    }
    Ok(())
}

/// The penalized profile likelihood evaluated directly from the panel.
pub fn ppl_objective(data: &PanelData, beta: &CoefficientMatrix, centers: &Centers, lambda: f64) -> Result<f64> {
    check_shapes(data, beta, centers)?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
    }
    let (n, t_len, p) = (data.n_units(), data.n_periods(), data.n_covariates());
    let mut loss = 0.0;
    let mut pen = 0.0;
    for i in 0..n {
        for t in 0..t_len {
            let fit: f64 = (0..p).map(|j| beta.beta[(i, j)] * data.x_at(i, t, j)).sum();
            loss += 0.5 * (data.y_at(i, t) - fit).powi(2);
        }
        pen += penalty(&beta.row(i), centers);
    }
    Ok(loss / (n * t_len) as f64 + lambda * pen / n as f64)
}

fn unit_loss(m: &PanelMoments, i: usize, b: &DVector<f64>) -> f64 {
    0.5 * (m.yy[i] - 2.0 * b.dot(&m.xy[i]) + (b.transpose() * &m.gram[i] * b)[(0, 0)])
}

fn objective_moments(m: &PanelMoments, beta: &DMatrix<f64>, centers: &Centers, lambda: f64) -> f64 {
    let n = m.n_units();
    let mut loss = 0.0;
    let mut pen = 0.0;
    for i in 0..n {
        let b = beta.row(i).transpose();
        loss += unit_loss(m, i, &b);
        pen += penalty(&b, centers);
    }
    loss / (n * m.n_periods) as f64 + lambda * pen / n as f64
}

fn total_penalty(beta: &DMatrix<f64>, centers: &Centers) -> f64 {
    (0..beta.nrows()).map(|i| penalty(&beta.row(i).transpose(), centers)).sum()
}

/// Unit objective scaled by `N`: `loss_i / T + lambda * prod_k d_k`.
fn unit_objective(m: &PanelMoments, i: usize, b: &DVector<f64>, centers: &Centers, lambda: f64) -> f64 {
    unit_loss(m, i, b) / m.n_periods as f64 + lambda * penalty(b, centers)
}

fn nearest_center(b: &DVector<f64>, centers: &Centers) -> usize {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.k() {
        let d = dist(b, &centers.alpha, k);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Proximal-gradient steps on one unit's slope with the centers held fixed.
fn slope_step(m: &PanelMoments, i: usize, start: &DVector<f64>, centers: &Centers, lambda: f64, lipschitz: f64, floor: f64, tol: f64) -> DVector<f64> {
    let t_len = m.n_periods as f64;
    let mut b = start.clone();
    let mut f = unit_objective(m, i, &b, centers, lambda);
    for _ in 0..INNER_STEPS {
        let ks = nearest_center(&b, centers);
        let anchor = centers.row(ks);
        let others = Centers::new(centers.alpha.clone().remove_row(ks));
        let (weight, grad_w) = if others.k() == 0 {
            (1.0, DVector::zeros(b.len()))
        } else {
            (penalty(&b, &others), penalty_gradient_with(&b, &others, floor))
        };
        let d_anchor = (&b - &anchor).norm();
        let grad_smooth = (&m.gram[i] * &b - &m.xy[i]) / t_len + grad_w * (lambda * d_anchor);
        let mut step = 1.0 / lipschitz;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let z = &b - &grad_smooth * step;
            let u = &z - &anchor;
            let nu = u.norm();
            let thr = step * lambda * weight;
            let cand = if nu > thr { &anchor + u * (1.0 - thr / nu) } else { anchor.clone() };
            let fc = unit_objective(m, i, &cand, centers, lambda);
            if fc <= f {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let change = (&cand - &b).amax();
        b = cand;
        f = fc;
        if change < tol * 0.1 {
            break;
        }
    }
    b
}

/// Weighted geometric-median update of each center, Gauss-Seidel over groups.
fn weiszfeld_step(beta: &DMatrix<f64>, centers: &mut Centers, floor: f64) {
    let (n, p) = (beta.nrows(), beta.ncols());
    for k in 0..centers.k() {
        let mut num = DVector::zeros(p);
        let mut den = 0.0;
        let mut old = 0.0;
        let mut coef = Vec::with_capacity(n);
        for i in 0..n {
            let b = beta.row(i).transpose();
            let c: f64 = (0..centers.k()).filter(|&l| l != k).map(|l| dist(&b, &centers.alpha, l)).product();
            let d = dist(&b, &centers.alpha, k);
            old += c * d;
            let w = c / d.max(floor);
            num += &b * w;
            den += w;
            coef.push(c);
        }
        if den.is_nan() || den <= 0.0 || !den.is_finite() {
            continue;
        }
        let cand = num / den;
        let new: f64 = (0..n)
            .map(|i| {
                let b = beta.row(i).transpose();
                coef[i] * (b - &cand).norm()
            })
            .sum();
        if new <= old {
            centers.alpha.row_mut(k).copy_from(&cand.transpose());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CenterUpdate {
    Weiszfeld,
    Kmeans,
}

struct RawFit {
    beta: DMatrix<f64>,
    centers: Centers,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn descend(m: &PanelMoments, k: usize, lambda: f64, update: CenterUpdate, opts: &OptimOptions) -> Result<RawFit> {
    let mut beta = unit_ols_moments(m)?;
    let n = beta.nrows();
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let init = kmeans_with(&PointSet::new(beta.clone())?, k, &opts.kmeans(), opts.seed)?;
    let mut centers = init.centers;
    let mut trace = vec![objective_moments(m, &beta, &centers, lambda)];
    if lambda == 0.0 {
        return Ok(RawFit {
            beta,
            centers,
            trace,
            converged: true,
            iterations: 0,
        });
    }
    let t_len = m.n_periods as f64;
    let lipschitz: Vec<f64> = m.gram.iter().map(|g| (g.clone().symmetric_eigen().eigenvalues.max() / t_len).max(1e-12)).collect();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let old_beta = beta.clone();
        let old_centers = centers.alpha.clone();
        for i in 0..n {
            let b = slope_step(m, i, &beta.row(i).transpose(), &centers, lambda, lipschitz[i], opts.smoothing, opts.tol);
            beta.row_mut(i).copy_from(&b.transpose());
        }
        match update {
            CenterUpdate::Weiszfeld => weiszfeld_step(&beta, &mut centers, opts.smoothing),
            CenterUpdate::Kmeans => {
                let (sol, _) = lloyd(&PointSet::new(beta.clone())?, &centers, crate::clustering::DEFAULT_MAX_ITER, crate::clustering::DEFAULT_CENTER_TOL);
                if total_penalty(&beta, &sol.centers) <= total_penalty(&beta, &centers) {
                    centers = sol.centers;
                }
            }
        }
        trace.push(objective_moments(m, &beta, &centers, lambda));
        let change = (&beta - &old_beta).amax().max((&centers.alpha - &old_centers).amax());
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::debug!("penalized fit stopped after {iterations} iterations without meeting tol");
    }
    Ok(RawFit {
        beta,
        centers,
        trace,
        converged,
        iterations,
    })
}

/// Which penalized estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenalizedMethod {
    /// C-Lasso with slopes snapped to their assigned center.
    Classo,
    /// k-means-Lasso: centers re-solved by k-means on the current slopes.
    KmeansLasso,
    /// C-Lasso iteration keeping the unit-specific slopes.
    Hssp,
}

impl PenalizedMethod {
    pub fn tag(self) -> EstimatorTag {
        match self {
            PenalizedMethod::Classo => EstimatorTag::Classo,
            PenalizedMethod::KmeansLasso => EstimatorTag::KmeansLasso,
            PenalizedMethod::Hssp => EstimatorTag::Hssp,
        }
    }

    pub fn from_tag(tag: EstimatorTag) -> Result<Self> {
        match tag {
            EstimatorTag::Classo => Ok(PenalizedMethod::Classo),
            EstimatorTag::KmeansLasso => Ok(PenalizedMethod::KmeansLasso),
            EstimatorTag::Hssp => Ok(PenalizedMethod::Hssp),
            other => Err(Error::InvalidArgument(format!("{other} is not a penalized estimator"))),
        }
    }
}

pub(crate) fn fit_moments(m: &PanelMoments, k: usize, lambda: f64, method: PenalizedMethod, opts: &OptimOptions) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if lambda.is_nan() || lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument("lambda must be a nonnegative number".into()));
    }
    let update = match method {
        PenalizedMethod::KmeansLasso => CenterUpdate::Kmeans,
        _ => CenterUpdate::Weiszfeld,
    };
    let raw = descend(m, k, lambda, update, opts)?;
    let assignment = classify_rows(&raw.beta, &raw.centers);
    let (beta, pre_snap) = match method {
        PenalizedMethod::Classo => {
            let mut snapped = raw.beta.clone();
            for (i, &g) in assignment.group_of.iter().enumerate() {
                snapped.row_mut(i).copy_from(&raw.centers.alpha.row(g));
            }
            (snapped, Some(raw.beta))
        }
        PenalizedMethod::Hssp => (raw.beta.clone(), Some(raw.beta)),
        PenalizedMethod::KmeansLasso => (raw.beta, None),
    };
    Ok(FitResult {
        beta: CoefficientMatrix::new(beta, method.tag()),
        pre_snap_beta: pre_snap.map(|b| CoefficientMatrix::new(b, method.tag())),
        centers: raw.centers,
        assignment,
        lambda,
        objective_trace: raw.trace,
        converged: raw.converged,
        iterations: raw.iterations,
    })
}

pub fn penalized_fit(data: &PanelData, k: usize, lambda: f64, method: PenalizedMethod, opts: &OptimOptions) -> Result<FitResult> {
    if !data.is_demeaned() {
        return Err(Error::NotDemeaned);
    }
    fit_moments(&PanelMoments::from_panel(data), k, lambda, method, opts)
}

/// C-Lasso fit; the returned slopes equal their assigned centers and the
/// unsnapped iterate is kept in `pre_snap_beta`.
pub fn classo_fit(data: &PanelData, k: usize, lambda: f64, opts: &OptimOptions) -> Result<FitResult> {
    penalized_fit(data, k, lambda, PenalizedMethod::Classo, opts)
}

pub fn kmeans_lasso_fit(data: &PanelData, k: usize, lambda: f64, opts: &OptimOptions) -> Result<FitResult> {
    penalized_fit(data, k, lambda, PenalizedMethod::KmeansLasso, opts)
}

pub fn hssp_fit(data: &PanelData, k: usize, lambda: f64, opts: &OptimOptions) -> Result<FitResult> {
    penalized_fit(data, k, lambda, PenalizedMethod::Hssp, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub grid: Vec<f64>,
    /// `grid.len() x folds` held-out mean squared prediction errors.
    pub fold_losses: DMatrix<f64>,
    pub selected_lambda: f64,
}

impl CvReport {
    pub fn mean_losses(&self) -> Vec<f64> {
        (0..self.grid.len()).map(|g| self.fold_losses.row(g).mean()).collect()
    }
}

pub fn lambda_grid(n_periods: usize) -> Vec<f64> {
    let scale = (n_periods as f64).powf(-1.0 / 3.0);
    LAMBDA_MULTIPLIERS.iter().map(|m| m * scale).collect()
}

/// Contiguous, unshuffled time blocks `[f*T/folds, (f+1)*T/folds)`.
pub fn time_folds(n_periods: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds).map(|f| f * n_periods / folds..(f + 1) * n_periods / folds).collect()
}

pub fn cross_validate_lambda(data: &PanelData, k: usize, method: EstimatorTag, folds: usize) -> Result<CvReport> {
    cross_validate_lambda_with(data, k, method, folds, &OptimOptions::default())
}

pub fn cross_validate_lambda_with(data: &PanelData, k: usize, method: EstimatorTag, folds: usize, opts: &OptimOptions) -> Result<CvReport> {
    let method = PenalizedMethod::from_tag(method)?;
    if !data.is_demeaned() {
        return Err(Error::NotDemeaned);
    }
    let t_len = data.n_periods();
    if folds < 2 || t_len < 2 * folds {
        return Err(Error::TooFewPeriods { periods: t_len, folds });
    }
    let grid = lambda_grid(t_len);
    let blocks = time_folds(t_len, folds);
    let (n, p) = (data.n_units(), data.n_covariates());
    let mut fold_losses = DMatrix::zeros(grid.len(), folds);
    for (f, block) in blocks.iter().enumerate() {
        let train = PanelMoments::from_periods(data, |t| !block.contains(&t));
        for (g, &lambda) in grid.iter().enumerate() {
            let fit = fit_moments(&train, k, lambda, method, opts)?;
            let mut sse = 0.0;
            for i in 0..n {
                for t in block.clone() {
                    let pred: f64 = (0..p).map(|j| fit.beta.beta[(i, j)] * data.x_at(i, t, j)).sum();
                    sse += (data.y_at(i, t) - pred).powi(2);
                }
            }
            fold_losses[(g, f)] = sse / (n * block.len()) as f64;
        }
    }
    let means: Vec<f64> = (0..grid.len()).map(|g| fold_losses.row(g).mean()).collect();
    let mut best = 0;
    for g in 1..grid.len() {
        if means[g] < means[best] {
            best = g;
        }
    }
    Ok(CvReport {
        selected_lambda: grid[best],
        grid,
        fold_losses,
    })
}
