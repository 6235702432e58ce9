//! Balanced panels, the one-way within transformation and the least-squares
//! building blocks shared by every estimator in the crate.
//!
//! Storage is unit-major: observation `(i, t)` of the outcome lives at
//! `y[i * T + t]` and covariate `j` of that observation at
//! `x[(i * T + t) * p + j]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clustering::{Centers, GroupAssignment};
use crate::error::{Error, GramScope, Result};

/// Gram matrices whose condition number exceeds this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    n_units: usize,
    n_periods: usize,
    n_covariates: usize,
    y: Vec<f64>,
    x: Vec<f64>,
    unit_labels: Vec<String>,
    time_labels: Vec<String>,
    demeaned: bool,
}

impl PanelData {
    /// Builds a raw (not demeaned) panel with default labels `1..=N`, `1..=T`.
    pub fn new(n_units: usize, n_periods: usize, n_covariates: usize, y: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        let unit_labels = (1..=n_units).map(|i| i.to_string()).collect();
        let time_labels = (1..=n_periods).map(|t| t.to_string()).collect();
        Self::with_labels(n_units, n_periods, n_covariates, y, x, unit_labels, time_labels)
    }

    pub fn with_labels(
        n_units: usize,
        n_periods: usize,
        n_covariates: usize,
        y: Vec<f64>,
        x: Vec<f64>,
        unit_labels: Vec<String>,
        time_labels: Vec<String>,
    ) -> Result<Self> {
        if n_units == 0 || n_periods == 0 || n_covariates == 0 {
            return Err(Error::Data("panel dimensions must be positive".into()));
        }
        if y.len() != n_units * n_periods {
            return Err(Error::Data(format!(
                "outcome has {} cells, expected {}",
                y.len(),
                n_units * n_periods
            )));
        }
        if x.len() != n_units * n_periods * n_covariates {
            return Err(Error::Data(format!(
                "regressors have {} cells, expected {}",
                x.len(),
                n_units * n_periods * n_covariates
            )));
        }
        if unit_labels.len() != n_units || time_labels.len() != n_periods {
            return Err(Error::Data("label count does not match panel shape".into()));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in panel".into()));
        }
        Ok(Self {
            n_units,
            n_periods,
            n_covariates,
            y,
            x,
            unit_labels,
            time_labels,
            demeaned: false,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn is_demeaned(&self) -> bool {
        self.demeaned
    }

    /// Overrides the demeaned flag. Meant for data that was transformed
    /// elsewhere; no check is made.
    pub fn set_demeaned(&mut self, demeaned: bool) {
        self.demeaned = demeaned;
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[String] {
        &self.time_labels
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Outcome series of unit `i`.
    pub fn y_unit(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_periods..(i + 1) * self.n_periods]
    }

    /// Regressor block of unit `i`, `T * p` values, period-major.
    pub fn x_unit(&self, i: usize) -> &[f64] {
        let w = self.n_periods * self.n_covariates;
        &self.x[i * w..(i + 1) * w]
    }

    pub fn x_at(&self, i: usize, t: usize, j: usize) -> f64 {
        self.x[(i * self.n_periods + t) * self.n_covariates + j]
    }

    pub fn y_at(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.n_periods + t]
    }

    /// Unit `i`'s regressors as a `T x p` matrix.
    pub fn x_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_periods, self.n_covariates, self.x_unit(i))
    }

    /// Units whose demeaned covariate column is identically zero.
    pub fn degenerate_units(&self) -> Vec<usize> {
        let (t_len, p) = (self.n_periods, self.n_covariates);
        (0..self.n_units)
            .filter(|&i| {
                let xi = self.x_unit(i);
                (0..p).any(|j| {
                    let first = xi[j];
                    (0..t_len).all(|t| xi[t * p + j] == first)
                })
            })
            .collect()
    }

    /// Z-scores the outcome and every covariate over the whole panel.
    pub fn standardized(&self) -> PanelData {
        fn zscore(values: &mut [f64], stride: usize, offset: usize) {
            let idx: Vec<usize> = (offset..values.len()).step_by(stride).collect();
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&k| values[k]).sum::<f64>() / n;
            let var = idx.iter().map(|&k| (values[k] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            for &k in &idx {
                values[k] = if sd > 0.0 { (values[k] - mean) / sd } else { 0.0 };
            }
        }
        let mut out = self.clone();
        zscore(&mut out.y, 1, 0);
        for j in 0..self.n_covariates {
            zscore(&mut out.x, self.n_covariates, j);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "unit-ols")]
    UnitOls,
    #[serde(rename = "SSP")]
    Classo,
    #[serde(rename = "Km")]
    KmeansLasso,
    #[serde(rename = "H-SSP")]
    Hssp,
    #[serde(rename = "F-Km")]
    FeasibleKmeans,
    #[serde(rename = "truth")]
    Truth,
}

impl EstimatorTag {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorTag::UnitOls => "unit-ols",
            EstimatorTag::Classo => "SSP",
            EstimatorTag::KmeansLasso => "Km",
            EstimatorTag::Hssp => "H-SSP",
            EstimatorTag::FeasibleKmeans => "F-Km",
            EstimatorTag::Truth => "truth",
        }
    }
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for EstimatorTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unit-ols" | "ols" => Ok(EstimatorTag::UnitOls),
            "ssp" | "classo" | "c-lasso" => Ok(EstimatorTag::Classo),
            "km" | "kmeans-lasso" => Ok(EstimatorTag::KmeansLasso),
            "h-ssp" | "hssp" => Ok(EstimatorTag::Hssp),
            "f-km" | "fkm" | "feasible-kmeans" => Ok(EstimatorTag::FeasibleKmeans),
            "truth" => Ok(EstimatorTag::Truth),
            other => Err(Error::InvalidArgument(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Per-unit slope estimates, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix {
    pub beta: DMatrix<f64>,
    pub estimator_tag: EstimatorTag,
}

impl CoefficientMatrix {
    pub fn new(beta: DMatrix<f64>, estimator_tag: EstimatorTag) -> Self {
        Self { beta, estimator_tag }
    }

    pub fn n_units(&self) -> usize {
        self.beta.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.ncols()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.beta.row(i).transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledCoefficient {
    pub beta: DVector<f64>,
    pub covariance_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSource {
    UnitOls,
    GroupCenter,
    Pooled,
}

/// `N x T` residual matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub eps: DMatrix<f64>,
    pub source: ResidualSource,
}

impl ResidualMatrix {
    pub fn unit(&self, i: usize) -> Vec<f64> {
        self.eps.row(i).iter().copied().collect()
    }
}

/// Subtracts each unit's time mean from the outcome and from every covariate.
pub fn within_transform(data: &PanelData) -> Result<PanelData> {
    if data.demeaned {
        return Err(Error::AlreadyDemeaned);
    }
    let mut out = demean_unchecked(data);
    out.demeaned = true;
    for i in out.degenerate_units() {
        log::warn!("unit {} has a constant covariate; its demeaned column is zero", data.unit_labels[i]);
    }
    Ok(out)
}

fn demean_unchecked(data: &PanelData) -> PanelData {
    let (t_len, p) = (data.n_periods, data.n_covariates);
    let mut out = data.clone();
    for i in 0..data.n_units {
        let ys = &mut out.y[i * t_len..(i + 1) * t_len];
        let ybar = ys.iter().sum::<f64>() / t_len as f64;
        ys.iter_mut().for_each(|v| *v -= ybar);
        let xs = &mut out.x[i * t_len * p..(i + 1) * t_len * p];
        for j in 0..p {
            let xbar = (0..t_len).map(|t| xs[t * p + j]).sum::<f64>() / t_len as f64;
            for t in 0..t_len {
                xs[t * p + j] -= xbar;
            }
        }
    }
    out
}

/// Recovers the fixed effects `mu_i = ybar_i - beta_i' xbar_i` from the raw panel.
pub fn fixed_effects(raw: &PanelData, beta: &CoefficientMatrix) -> Result<Vec<f64>> {
    if beta.n_units() != raw.n_units || beta.n_covariates() != raw.n_covariates {
        return Err(Error::ShapeMismatch("coefficients do not match panel".into()));
    }
    let (t_len, p) = (raw.n_periods as f64, raw.n_covariates);
    Ok((0..raw.n_units)
        .map(|i| {
            let ybar = raw.y_unit(i).iter().sum::<f64>() / t_len;
            let xi = raw.x_unit(i);
            let fit: f64 = (0..p)
                .map(|j| {
                    let xbar = xi.iter().skip(j).step_by(p).sum::<f64>() / t_len;
                    beta.beta[(i, j)] * xbar
                })
                .sum();
            ybar - fit
        })
        .collect())
}

/// Sufficient statistics of each unit's regression: `X'X`, `X'y`, `y'y`.
#[derive(Debug, Clone)]
pub struct PanelMoments {
    pub gram: Vec<DMatrix<f64>>,
    pub xy: Vec<DVector<f64>>,
    pub yy: Vec<f64>,
    pub n_periods: usize,
}

impl PanelMoments {
    pub fn from_panel(data: &PanelData) -> Self {
        Self::from_periods(data, |_| true)
    }

    /// Moments restricted to the periods accepted by `keep`.
    pub fn from_periods(data: &PanelData, keep: impl Fn(usize) -> bool) -> Self {
        let p = data.n_covariates;
        let periods: Vec<usize> = (0..data.n_periods).filter(|&t| keep(t)).collect();
        let mut gram = Vec::with_capacity(data.n_units);
        let mut xy = Vec::with_capacity(data.n_units);
        let mut yy = Vec::with_capacity(data.n_units);
        for i in 0..data.n_units {
            let mut g = DMatrix::zeros(p, p);
            let mut c = DVector::zeros(p);
            let mut s = 0.0;
            for &t in &periods {
                let yv = data.y_at(i, t);
                let row = &data.x_unit(i)[t * p..(t + 1) * p];
                for a in 0..p {
                    c[a] += row[a] * yv;
                    for b in 0..p {
                        g[(a, b)] += row[a] * row[b];
                    }
                }
                s += yv * yv;
            }
            gram.push(g);
            xy.push(c);
            yy.push(s);
        }
        Self {
            gram,
            xy,
            yy,
            n_periods: periods.len(),
        }
    }

    pub fn n_units(&self) -> usize {
        self.gram.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.xy.first().map_or(0, |c| c.len())
    }
}

/// Solves `gram * b = rhs` through a Cholesky factorization, rejecting
/// matrices that are not positive definite or whose condition number
/// exceeds [`MAX_CONDITION`].
pub fn solve_spd(gram: &DMatrix<f64>, rhs: &DVector<f64>, scope: GramScope) -> Result<DVector<f64>> {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min.is_nan() || min <= 0.0 || max / min > MAX_CONDITION {
        return Err(Error::SingularGram(scope));
    }
    let chol = gram.clone().cholesky().ok_or(Error::SingularGram(scope))?;
    Ok(chol.solve(rhs))
}

pub(crate) fn unit_ols_moments(m: &PanelMoments) -> Result<DMatrix<f64>> {
    let (n, p) = (m.n_units(), m.n_covariates());
    let mut beta = DMatrix::zeros(n, p);
    for i in 0..n {
        let b = solve_spd(&m.gram[i], &m.xy[i], GramScope::Unit(i))?;
        beta.row_mut(i).copy_from(&b.transpose());
    }
    Ok(beta)
}

/// Unit-by-unit least squares, `(x_i'x_i)^{-1} x_i'y_i` for every unit.
pub fn unit_ols(data: &PanelData) -> Result<CoefficientMatrix> {
    if !data.demeaned {
        return Err(Error::NotDemeaned);
    }
    let m = PanelMoments::from_panel(data);
    Ok(CoefficientMatrix::new(unit_ols_moments(&m)?, EstimatorTag::UnitOls))
}

/// Pooled least squares over all units and periods. `covariance_scale` is the
/// residual variance `e'e / (NT - p)`.
pub fn pooled_ols(data: &PanelData) -> Result<PooledCoefficient> {
    if !data.demeaned {
        return Err(Error::NotDemeaned);
    }
    let m = PanelMoments::from_panel(data);
    let p = data.n_covariates;
    let mut g = DMatrix::zeros(p, p);
    let mut c = DVector::zeros(p);
    let mut yy = 0.0;
    for i in 0..data.n_units {
        g += &m.gram[i];
        c += &m.xy[i];
        yy += m.yy[i];
    }
    let beta = solve_spd(&g, &c, GramScope::Pooled)?;
    let rss = (yy - 2.0 * beta.dot(&c) + (beta.transpose() * &g * &beta)[(0, 0)]).max(0.0);
    let dof = (data.n_units * data.n_periods).saturating_sub(p).max(1);
    Ok(PooledCoefficient {
        beta,
        covariance_scale: rss / dof as f64,
    })
}

/// Mean Group estimator: the average of unit OLS slopes over `subset`
/// (all units when `None`). `covariance_scale` is the cross-sectional
/// variance of the averaged slopes divided by the subset size.
pub fn mean_group(data: &PanelData, subset: Option<&[usize]>) -> Result<PooledCoefficient> {
    if !data.demeaned {
        return Err(Error::NotDemeaned);
    }
    let all: Vec<usize>;
    let units = match subset {
        Some(s) => s,
        None => {
            all = (0..data.n_units).collect();
            &all
        }
    };
    if units.is_empty() {
        return Err(Error::EmptySubset);
    }
    let m = PanelMoments::from_panel(data);
    let p = data.n_covariates;
    let mut rows = Vec::with_capacity(units.len());
    for &i in units {
        if i >= data.n_units {
            return Err(Error::InvalidArgument(format!("unit index {i} out of range")));
        }
        rows.push(solve_spd(&m.gram[i], &m.xy[i], GramScope::Unit(i))?);
    }
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(p);
    for r in &rows {
        mean += r;
    }
    mean /= n;
    let spread = if rows.len() > 1 {
        rows.iter().map(|r| (r - &mean).norm_squared()).sum::<f64>() / (n - 1.0) / n
    } else {
        0.0
    };
    Ok(PooledCoefficient {
        beta: mean,
        covariance_scale: spread,
    })
}

/// `eps_it = y_it - alpha_{k(i)}' x_it` with `k(i)` the assigned group.
pub fn residuals_from_centers(data: &PanelData, centers: &Centers, assignment: &GroupAssignment) -> Result<ResidualMatrix> {
    let (n, t_len, p) = (data.n_units, data.n_periods, data.n_covariates);
    if assignment.group_of.len() != n {
        return Err(Error::UnassignedUnit(assignment.group_of.len().min(n)));
    }
    if centers.alpha.ncols() != p {
        return Err(Error::ShapeMismatch("center width differs from covariate count".into()));
    }
    let mut eps = DMatrix::zeros(n, t_len);
    for i in 0..n {
        let k = assignment.group_of[i];
        if k >= centers.k() {
            return Err(Error::UnassignedUnit(i));
        }
        let xi = data.x_unit(i);
        for t in 0..t_len {
            let fit: f64 = (0..p).map(|j| centers.alpha[(k, j)] * xi[t * p + j]).sum();
            eps[(i, t)] = data.y_at(i, t) - fit;
        }
    }
    Ok(ResidualMatrix {
        eps,
        source: ResidualSource::GroupCenter,
    })
}

/// Residuals of each unit's own least-squares fit.
pub fn unit_ols_residuals(data: &PanelData, beta: &CoefficientMatrix) -> Result<ResidualMatrix> {
    let (n, t_len, p) = (data.n_units, data.n_periods, data.n_covariates);
    if beta.n_units() != n || beta.n_covariates() != p {
        return Err(Error::ShapeMismatch("coefficients do not match panel".into()));
    }
    let mut eps = DMatrix::zeros(n, t_len);
    for i in 0..n {
        let xi = data.x_unit(i);
        for t in 0..t_len {
            let fit: f64 = (0..p).map(|j| beta.beta[(i, j)] * xi[t * p + j]).sum();
            eps[(i, t)] = data.y_at(i, t) - fit;
        }
    }
    Ok(ResidualMatrix {
        eps,
        source: ResidualSource::UnitOls,
    })
}
