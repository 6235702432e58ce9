//! Choosing the number of groups from a set of slope estimates.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, GroupAssignment, KmeansSolution, PointSet, DEFAULT_RESTARTS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_B_REFS: usize = 50;

const REFERENCE_STREAM: u64 = 0x005E_ED0F_0EF5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Gap,
    Silhouette,
    Ch,
    Db,
}

impl SelectionMethod {
    pub fn label(self) -> &'static str {
        match self {
            SelectionMethod::Gap => "gap",
            SelectionMethod::Silhouette => "silhouette",
            SelectionMethod::Ch => "ch",
            SelectionMethod::Db => "db",
        }
    }
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gap" => Ok(SelectionMethod::Gap),
            "silhouette" | "sil" => Ok(SelectionMethod::Silhouette),
            "ch" | "calinski-harabasz" => Ok(SelectionMethod::Ch),
            "db" | "davies-bouldin" => Ok(SelectionMethod::Db),
            other => Err(Error::InvalidArgument(format!("unknown selection method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapResult {
    pub k_grid: Vec<usize>,
    pub log_w: Vec<f64>,
    pub ref_log_w_mean: Vec<f64>,
    pub s_k: Vec<f64>,
    pub gap: Vec<f64>,
    pub selected_k: usize,
    pub b_refs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexScores {
    pub method: SelectionMethod,
    pub k_grid: Vec<usize>,
    pub scores: Vec<f64>,
    pub selected_k: usize,
}

fn sq_dist(points: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    (0..points.ncols()).map(|j| (points[(a, j)] - points[(b, j)]).powi(2)).sum()
}

fn check_assignment(points: &PointSet, assignment: &GroupAssignment) -> Result<()> {
    if assignment.n_units() != points.len() {
        return Err(Error::LengthMismatch(points.len(), assignment.n_units()));
    }
    Ok(())
}

/// Pooled within-group dispersion in its pairwise form,
/// `sum_k 1/(2 n_k) sum_{i,j in k} ||b_i - b_j||^2`.
pub fn within_dispersion(points: &PointSet, assignment: &GroupAssignment) -> Result<f64> {
    check_assignment(points, assignment)?;
    let mut total = 0.0;
    for k in 0..assignment.k() {
        let members = assignment.members(k);
        if members.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                s += sq_dist(&points.points, i, j);
            }
        }
        // each unordered pair appears twice in the double sum
        total += s / members.len() as f64;
    }
    Ok(total)
}

/// Same quantity via squared distances to group means.
pub fn within_dispersion_centroid(points: &PointSet, assignment: &GroupAssignment) -> Result<f64> {
    check_assignment(points, assignment)?;
    let mut total = 0.0;
    for k in 0..assignment.k() {
        let members = assignment.members(k);
        if members.is_empty() {
            continue;
        }
        for j in 0..points.dim() {
            let mean = members.iter().map(|&i| points.points[(i, j)]).sum::<f64>() / members.len() as f64;
            total += members.iter().map(|&i| (points.points[(i, j)] - mean).powi(2)).sum::<f64>();
        }
    }
    Ok(total)
}

fn safe_ln(w: f64) -> f64 {
    w.max(f64::MIN_POSITIVE).ln()
}

fn cluster(points: &PointSet, k: usize, seed: u64) -> Result<KmeansSolution> {
    kmeans(points, k, DEFAULT_RESTARTS, derive_seed(seed, k as u64))
}

fn log_dispersions(points: &PointSet, k_max: usize, seed: u64) -> Result<Vec<f64>> {
    (1..=k_max)
        .map(|k| {
            let sol = cluster(points, k, seed)?;
            Ok(safe_ln(within_dispersion_centroid(points, &sol.assignment)?))
        })
        .collect()
}

fn reference_set(points: &PointSet, seed: u64) -> Result<PointSet> {
    let (n, p) = (points.len(), points.dim());
    let mut rng = stream(seed);
    let bounds: Vec<(f64, f64)> = (0..p)
        .map(|j| {
            let col = points.points.column(j);
            (col.min(), col.max())
        })
        .collect();
    let draws = DMatrix::from_fn(n, p, |_, j| {
        let (lo, hi) = bounds[j];
        lo + (hi - lo) * rng.random::<f64>()
    });
    PointSet::new(draws)
}

/// First `k` with `gap[k] >= gap[k+1] - s[k+1]`, else the largest candidate.
pub fn first_crossing(k_grid: &[usize], gap: &[f64], s_k: &[f64]) -> usize {
    for i in 0..k_grid.len().saturating_sub(1) {
        if gap[i] >= gap[i + 1] - s_k[i + 1] {
            return k_grid[i];
        }
    }
    *k_grid.last().expect("nonempty grid")
}

/// Gap statistic over `K = 1..=k_max` with uniform bounding-box references.
pub fn gap_statistic(points: &PointSet, k_max: usize, b_refs: usize, seed: u64) -> Result<GapResult> {
    let n = points.len();
    if k_max == 0 || b_refs == 0 {
        return Err(Error::InvalidArgument("k_max and b_refs must be positive".into()));
    }
    if k_max >= n {
        return Err(Error::KGridTooLarge { k_max, n });
    }
    let log_w = log_dispersions(points, k_max, seed)?;
    let ref_root = derive_seed(seed, REFERENCE_STREAM);
    let refs: Vec<Vec<f64>> = (0..b_refs)
        .into_par_iter()
        .map(|b| {
            let s = derive_seed(ref_root, b as u64);
            log_dispersions(&reference_set(points, s)?, k_max, s)
        })
        .collect::<Result<_>>()?;
    let bf = b_refs as f64;
    let mut ref_log_w_mean = Vec::with_capacity(k_max);
    let mut s_k = Vec::with_capacity(k_max);
    for k in 0..k_max {
        let mean = refs.iter().map(|r| r[k]).sum::<f64>() / bf;
        let var = refs.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / bf;
        ref_log_w_mean.push(mean);
        s_k.push(var.sqrt() * (1.0 + 1.0 / bf).sqrt());
    }
    let gap: Vec<f64> = ref_log_w_mean.iter().zip(&log_w).map(|(r, w)| r - w).collect();
    let k_grid: Vec<usize> = (1..=k_max).collect();
    let selected_k = first_crossing(&k_grid, &gap, &s_k);
    Ok(GapResult {
        k_grid,
        log_w,
        ref_log_w_mean,
        s_k,
        gap,
        selected_k,
        b_refs,
    })
}

/// Mean silhouette width with Euclidean distances; singletons score 0.
pub fn silhouette(points: &PointSet, assignment: &GroupAssignment) -> Result<f64> {
    check_assignment(points, assignment)?;
    let n = points.len();
    let k = assignment.k();
    let mut total = 0.0;
    for i in 0..n {
        let own = assignment.group_of[i];
        if assignment.sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[assignment.group_of[j]] += sq_dist(&points.points, i, j).sqrt();
            }
        }
        let a = sums[own] / (assignment.sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&g| g != own && assignment.sizes[g] > 0)
            .map(|g| sums[g] / assignment.sizes[g] as f64)
            .fold(f64::INFINITY, f64::min);
        if !b.is_finite() {
            continue;
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

fn group_means(points: &PointSet, assignment: &GroupAssignment) -> DMatrix<f64> {
    let mut means = DMatrix::zeros(assignment.k(), points.dim());
    for (i, &g) in assignment.group_of.iter().enumerate() {
        for j in 0..points.dim() {
            means[(g, j)] += points.points[(i, j)];
        }
    }
    for g in 0..assignment.k() {
        if assignment.sizes[g] > 0 {
            let scale = 1.0 / assignment.sizes[g] as f64;
            means.row_mut(g).scale_mut(scale);
        }
    }
    means
}

/// Calinski-Harabasz ratio `[B/(K-1)] / [W/(N-K)]`.
pub fn calinski_harabasz(points: &PointSet, assignment: &GroupAssignment) -> Result<f64> {
    check_assignment(points, assignment)?;
    let (n, k) = (points.len(), assignment.k());
    if k < 2 || n <= k {
        return Err(Error::InvalidArgument("Calinski-Harabasz needs 2 <= K < N".into()));
    }
    let means = group_means(points, assignment);
    let grand: Vec<f64> = (0..points.dim()).map(|j| points.points.column(j).mean()).collect();
    let between: f64 = (0..k)
        .map(|g| assignment.sizes[g] as f64 * (0..points.dim()).map(|j| (means[(g, j)] - grand[j]).powi(2)).sum::<f64>())
        .sum();
    let within = within_dispersion_centroid(points, assignment)?;
    let num = between / (k - 1) as f64;
    let den = within / (n - k) as f64;
    Ok(if den > 0.0 { num / den } else { f64::INFINITY })
}

/// Davies-Bouldin index; lower is better.
pub fn davies_bouldin(points: &PointSet, assignment: &GroupAssignment) -> Result<f64> {
    check_assignment(points, assignment)?;
    let k = assignment.k();
    if k < 2 {
        return Err(Error::InvalidArgument("Davies-Bouldin needs K >= 2".into()));
    }
    let means = group_means(points, assignment);
    let mut scatter = vec![0.0; k];
    for (i, &g) in assignment.group_of.iter().enumerate() {
        scatter[g] += (0..points.dim()).map(|j| (points.points[(i, j)] - means[(g, j)]).powi(2)).sum::<f64>().sqrt();
    }
    for g in 0..k {
        if assignment.sizes[g] > 0 {
            scatter[g] /= assignment.sizes[g] as f64;
        }
    }
    let mut total = 0.0;
    for a in 0..k {
        let mut worst = 0.0_f64;
        for b in (0..k).filter(|&b| b != a) {
            let sep = (0..points.dim()).map(|j| (means[(a, j)] - means[(b, j)]).powi(2)).sum::<f64>().sqrt();
            let r = if sep > 0.0 { (scatter[a] + scatter[b]) / sep } else { f64::INFINITY };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Scores `K = 2..=k_max` with an internal validity index and picks the best
/// (ties go to the smaller K).
pub fn index_select(points: &PointSet, method: SelectionMethod, k_max: usize, seed: u64) -> Result<IndexScores> {
    if method == SelectionMethod::Gap {
        return Err(Error::InvalidArgument("use gap_statistic for the gap method".into()));
    }
    if k_max < 2 {
        return Err(Error::MethodNeedsK2);
    }
    let n = points.len();
    if k_max >= n {
        return Err(Error::KGridTooLarge { k_max, n });
    }
    let k_grid: Vec<usize> = (2..=k_max).collect();
    let mut scores = Vec::with_capacity(k_grid.len());
    for &k in &k_grid {
        let sol = cluster(points, k, seed)?;
        scores.push(match method {
            SelectionMethod::Silhouette => silhouette(points, &sol.assignment)?,
            SelectionMethod::Ch => calinski_harabasz(points, &sol.assignment)?,
            SelectionMethod::Db => davies_bouldin(points, &sol.assignment)?,
            SelectionMethod::Gap => unreachable!(),
        });
    }
    let better = |a: f64, b: f64| if method == SelectionMethod::Db { a < b } else { a > b };
    let mut best = 0;
    for i in 1..scores.len() {
        if better(scores[i], scores[best]) {
            best = i;
        }
    }
    Ok(IndexScores {
        method,
        selected_k: k_grid[best],
        k_grid,
        scores,
    })
}
