//! k-means machinery, nearest-center classification and the Rand index.
//!
//! The k-means objective uses squared Euclidean distances while
//! classification uses the Euclidean norm; both give the same argmin.
//! Distance ties always resolve to the lowest group index.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::estimators::FitResult;
use crate::panel::{unit_ols, CoefficientMatrix, EstimatorTag, PanelData};
use crate::rng::{derive_seed, stream};

pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_CENTER_TOL: f64 = 1e-8;

/// Group centers, one row per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub alpha: DMatrix<f64>,
}

impl Centers {
    pub fn new(alpha: DMatrix<f64>) -> Self {
        Self { alpha }
    }

    pub fn k(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.alpha.row(k).transpose()
    }

    /// Smallest pairwise Euclidean distance between centers.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.k() {
            for b in a + 1..self.k() {
                best = best.min((self.alpha.row(a) - self.alpha.row(b)).norm());
            }
        }
        best
    }
}

/// Zero-based group index for every unit, plus group sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub group_of: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl GroupAssignment {
    pub fn from_labels(group_of: Vec<usize>, k: usize) -> Self {
        let k = k.max(group_of.iter().map(|&g| g + 1).max().unwrap_or(0));
        let mut sizes = vec![0; k];
        for &g in &group_of {
            sizes[g] += 1;
        }
        Self { group_of, sizes }
    }

    pub fn n_units(&self) -> usize {
        self.group_of.len()
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn members(&self, k: usize) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter_map(|(i, &g)| (g == k).then_some(i))
            .collect()
    }
}

/// Points to be clustered, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: DMatrix<f64>,
}

impl PointSet {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point set has non-finite entries".into()));
        }
        Ok(Self { points })
    }

    pub fn from_coefficients(beta: &CoefficientMatrix) -> Result<Self> {
        Self::new(beta.beta.clone())
    }

    pub fn from_column(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansSolution {
    pub centers: Centers,
    pub assignment: GroupAssignment,
    pub within_ss: f64,
    pub restarts_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        Self {
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_CENTER_TOL,
        }
    }
}

fn sq_dist_row(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, k: usize) -> f64 {
    (0..points.ncols()).map(|j| (points[(i, j)] - centers[(k, j)]).powi(2)).sum()
}

fn nearest(points: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.nrows() {
        let d = sq_dist_row(points, i, centers, k);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &DMatrix<f64>, centers: &DMatrix<f64>) -> Vec<usize> {
    (0..points.nrows()).map(|i| nearest(points, i, centers).0).collect()
}

/// Sum of squared distances from each point to its assigned center.
pub fn within_ss(points: &DMatrix<f64>, centers: &DMatrix<f64>, group_of: &[usize]) -> f64 {
    group_of.iter().enumerate().map(|(i, &k)| sq_dist_row(points, i, centers, k)).sum()
}

fn group_means(points: &DMatrix<f64>, group_of: &mut [usize], k: usize, previous: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = (points.nrows(), points.ncols());
    loop {
        let mut sums = DMatrix::zeros(k, p);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[group_of[i]] += 1;
            for j in 0..p {
                sums[(group_of[i], j)] += points[(i, j)];
            }
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            for g in 0..k {
                for j in 0..p {
                    sums[(g, j)] /= counts[g] as f64;
                }
            }
            return sums;
        };
        // empty cluster: reseed at the point farthest from its current center,
        // taken from a cluster that can spare it
        let mut far = None;
        let mut far_d = -1.0;
        for i in 0..n {
            if counts[group_of[i]] > 1 {
                let d = sq_dist_row(points, i, previous, group_of[i]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        match far {
            Some(i) => group_of[i] = empty,
            None => {
                // fewer distinct points than clusters; keep the old center
                for g in 0..k {
                    for j in 0..p {
                        sums[(g, j)] = if counts[g] > 0 { sums[(g, j)] / counts[g] as f64 } else { previous[(g, j)] };
                    }
                }
                return sums;
            }
        }
    }
}

/// Lloyd iterations from the given centers. Returns the fixed point and the
/// within-cluster sum of squares recorded after every center update.
pub fn lloyd(points: &PointSet, init: &Centers, max_iter: usize, tol: f64) -> (KmeansSolution, Vec<f64>) {
    let pts = &points.points;
    let k = init.k();
    let mut centers = init.alpha.clone();
    let mut assign = assign_all(pts, &centers);
    let mut trace = vec![within_ss(pts, &centers, &assign)];
    for _ in 0..max_iter {
        let mut moved = assign.clone();
        let new_centers = group_means(pts, &mut moved, k, &centers);
        let shift = (&new_centers - &centers).abs().max();
        trace.push(within_ss(pts, &new_centers, &moved));
        centers = new_centers;
        let next = assign_all(pts, &centers);
        let unchanged = next == assign;
        assign = next;
        if unchanged || shift < tol {
            break;
        }
    }
    let wss = within_ss(pts, &centers, &assign);
    let solution = KmeansSolution {
        centers: Centers::new(centers),
        assignment: GroupAssignment::from_labels(assign, k),
        within_ss: wss,
        restarts_used: 1,
    };
    (solution, trace)
}

/// Single-point transfer passes: move a point to another cluster whenever
/// that lowers the within-cluster sum of squares once both means are
/// updated. Its fixed points are a subset of Lloyd's, so this only escapes
/// local optima that Lloyd cannot see.
fn transfer_refine(points: &PointSet, sol: KmeansSolution, max_passes: usize, tol: f64) -> KmeansSolution {
    let pts = &points.points;
    let (n, p) = (pts.nrows(), pts.ncols());
    let k = sol.centers.k();
    let mut group_of = sol.assignment.group_of;
    let mut counts = sol.assignment.sizes;
    let mut centers = sol.centers.alpha;
    let mut moved_any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..n {
            let a = group_of[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist_row(pts, i, &centers, a);
            let mut best = (a, remove);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist_row(pts, i, &centers, b);
                if add < best.1 {
                    best = (b, add);
                }
            }
            let (b, add) = best;
            if b == a || add >= remove * (1.0 - 1e-12) {
                continue;
            }
            let nb = counts[b] as f64;
            for j in 0..p {
                let x = pts[(i, j)];
                centers[(a, j)] = (na * centers[(a, j)] - x) / (na - 1.0);
                centers[(b, j)] = (nb * centers[(b, j)] + x) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            group_of[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if !moved_any {
        return KmeansSolution {
            centers: Centers::new(centers),
            assignment: GroupAssignment::from_labels(group_of, k),
            within_ss: sol.within_ss,
            restarts_used: sol.restarts_used,
        };
    }
    // exact means, then Lloyd to land on a nearest-center fixed point
    let means = group_means(pts, &mut group_of, k, &centers);
    lloyd(points, &Centers::new(means), max_passes, tol).0
}

/// k-means++ seeding.
pub fn kmeans_plus_plus<R: Rng>(points: &PointSet, k: usize, rng: &mut R) -> Centers {
    let pts = &points.points;
    let (n, p) = (pts.nrows(), pts.ncols());
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| (0..p).map(|j| (pts[(i, j)] - pts[(chosen[0], j)]).powi(2)).sum())
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for i in 0..n {
            let d: f64 = (0..p).map(|j| (pts[(i, j)] - pts[(next, j)]).powi(2)).sum();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    let mut alpha = DMatrix::zeros(k, p);
    for (g, &i) in chosen.iter().enumerate() {
        alpha.row_mut(g).copy_from(&pts.row(i));
    }
    Centers::new(alpha)
}

/// Best-of-restarts k-means with k-means++ seeds, Lloyd iterations and a
/// transfer refinement. Restart `r` draws from the stream
/// `derive_seed(seed, r)`; ties in within-SS keep the earlier restart.
pub fn kmeans(points: &PointSet, k: usize, restarts: usize, seed: u64) -> Result<KmeansSolution> {
    kmeans_with(
        points,
        k,
        &KmeansOptions {
            restarts,
            ..KmeansOptions::default()
        },
        seed,
    )
}

pub fn kmeans_with(points: &PointSet, k: usize, opts: &KmeansOptions, seed: u64) -> Result<KmeansSolution> {
    let n = points.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let restarts = opts.restarts.max(1);
    let mut best: Option<KmeansSolution> = None;
    for r in 0..restarts {
        let mut rng = stream(derive_seed(seed, r as u64));
        let init = kmeans_plus_plus(points, k, &mut rng);
        let (sol, _) = lloyd(points, &init, opts.max_iter, opts.tol);
        let sol = transfer_refine(points, sol, opts.max_iter, opts.tol);
        if best.as_ref().is_none_or(|b| sol.within_ss < b.within_ss) {
            best = Some(sol);
        }
    }
    let mut best = best.expect("at least one restart");
    best.restarts_used = restarts;
    Ok(best)
}

/// Maps every unit to its nearest center (Euclidean), ties to the lowest index.
pub fn classify(beta: &CoefficientMatrix, centers: &Centers) -> GroupAssignment {
    classify_rows(&beta.beta, centers)
}

pub fn classify_rows(rows: &DMatrix<f64>, centers: &Centers) -> GroupAssignment {
    GroupAssignment::from_labels(assign_all(rows, &centers.alpha), centers.k())
}

fn pairs(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Fraction of unit pairs on which two partitions agree.
pub fn rand_index(a: &GroupAssignment, b: &GroupAssignment) -> Result<f64> {
    let n = a.n_units();
    if n != b.n_units() {
        return Err(Error::LengthMismatch(n, b.n_units()));
    }
    if n < 2 {
        return Ok(1.0);
    }
    let ka = a.group_of.iter().max().map_or(0, |m| m + 1);
    let kb = b.group_of.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; ka * kb];
    for (&ga, &gb) in a.group_of.iter().zip(&b.group_of) {
        table[ga * kb + gb] += 1;
    }
    let both: f64 = table.iter().map(|&c| pairs(c)).sum();
    let mut row = vec![0usize; ka];
    let mut col = vec![0usize; kb];
    for ga in 0..ka {
        for gb in 0..kb {
            row[ga] += table[ga * kb + gb];
            col[gb] += table[ga * kb + gb];
        }
    }
    let same_a: f64 = row.iter().map(|&c| pairs(c)).sum();
    let same_b: f64 = col.iter().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let separated_both = total - same_a - same_b + both;
    Ok((both + separated_both) / total)
}

/// Unit-by-unit OLS followed by k-means on the estimated slopes.
pub fn feasible_kmeans(data: &PanelData, k: usize, seed: u64) -> Result<FitResult> {
    feasible_kmeans_with(data, k, &KmeansOptions::default(), seed)
}

pub fn feasible_kmeans_with(data: &PanelData, k: usize, opts: &KmeansOptions, seed: u64) -> Result<FitResult> {
    let beta = unit_ols(data)?;
    let sol = kmeans_with(&PointSet::from_coefficients(&beta)?, k, opts, seed)?;
    let beta = CoefficientMatrix::new(beta.beta, EstimatorTag::FeasibleKmeans);
    Ok(FitResult {
        beta,
        pre_snap_beta: None,
        centers: sol.centers,
        assignment: sol.assignment,
        lambda: 0.0,
        objective_trace: vec![sol.within_ss],
        converged: true,
        iterations: 0,
    })
}
