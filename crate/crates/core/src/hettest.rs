//! Tests for slope heterogeneity across units and within estimated groups.
//!
//! Each unit's residuals are regressed on its covariates. Under slope
//! homogeneity the standardized auxiliary coefficients are approximately
//! standard normal, so `t^2 - 1` (or `T r^2 - 1`) has mean zero across units;
//! the standardized cross-sectional mean of these components is squared and
//! summed over covariates to give a chi-squared statistic with `p` degrees of
//! freedom.

use nalgebra::DVector;

use crate::error::{Error, GramScope, Result};
use crate::estimators::FitResult;
use crate::panel::{residuals_from_centers, solve_spd, PanelData, ResidualMatrix};

pub const MIN_GROUP_SIZE: usize = 10;
const DEGENERATE_RSS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitTScore {
    /// One standardized auxiliary coefficient per covariate.
    pub t: DVector<f64>,
    pub sigma_hat: f64,
    pub gamma_hat: DVector<f64>,
    /// Share of `eps'eps` explained by each covariate, `gamma_j^2 G_jj / eps'eps`.
    pub r2: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    S,
    R,
}

impl TestKind {
    pub fn label(self) -> &'static str {
        match self {
            TestKind::S => "s",
            TestKind::R => "r",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(TestKind::S),
            "r" => Ok(TestKind::R),
            other => Err(Error::InvalidArgument(format!("unknown test kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestScope {
    CrossSection,
    /// 0-based group index.
    Group(usize),
}

impl std::fmt::Display for TestScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TestScope::CrossSection => f.write_str("cross-section"),
            TestScope::Group(k) => write!(f, "group({})", k + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Per-unit components, `t` for the s-test and `T r^2` for the r-test,
    /// one row per unit used and one column per covariate.
    pub per_unit: Vec<Vec<f64>>,
    /// Standardized cross-sectional means, one per covariate.
    pub per_covariate: Vec<f64>,
    pub scope: TestScope,
    pub n_used: usize,
}

impl TestResult {
    pub fn stars(&self) -> &'static str {
        stars(self.p_value)
    }

    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupTest {
    Tested(TestResult),
    Skipped { group: usize, size: usize, reason: String },
}

impl GroupTest {
    pub fn result(&self) -> Option<&TestResult> {
        match self {
            GroupTest::Tested(r) => Some(r),
            GroupTest::Skipped { .. } => None,
        }
    }
}

pub fn stars(p_value: f64) -> &'static str {
    if p_value < 0.01 {
        "***"
    } else if p_value < 0.05 {
        "**"
    } else if p_value < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

/// Auxiliary regression of unit `i`'s residuals on its covariates.
pub fn unit_t(data: &PanelData, i: usize, eps_i: &[f64]) -> Result<UnitTScore> {
    let (t_len, p) = (data.n_periods(), data.n_covariates());
    if eps_i.len() != t_len {
        return Err(Error::LengthMismatch(t_len, eps_i.len()));
    }
    if t_len < 3 {
        return Err(Error::InvalidArgument("at least three periods are needed".into()));
    }
    let x = data.x_matrix(i);
    let e = DVector::from_column_slice(eps_i);
    let gram = x.transpose() * &x;
    let xe = x.transpose() * &e;
    let gamma = solve_spd(&gram, &xe, GramScope::Unit(i))?;
    let v = &e - &x * &gamma;
    let vv = compensated_sum(v.iter().map(|r| r * r));
    if vv < DEGENERATE_RSS {
        return Err(Error::DegenerateResiduals(i));
    }
    let sigma = (vv / t_len as f64).sqrt();
    let ee = compensated_sum(e.iter().map(|r| r * r));
    let mut t = DVector::zeros(p);
    let mut r2 = DVector::zeros(p);
    for j in 0..p {
        let mut unit_vec = DVector::zeros(p);
        unit_vec[j] = 1.0;
        let inv_jj = solve_spd(&gram, &unit_vec, GramScope::Unit(i))?[j];
        t[j] = gamma[j] / (sigma * inv_jj.sqrt());
        r2[j] = gamma[j] * gamma[j] * gram[(j, j)] / ee;
    }
    Ok(UnitTScore {
        t,
        sigma_hat: sigma,
        gamma_hat: gamma,
        r2,
    })
}

/// Upper tail of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return 1.0;
    }
    gamma_q(df as f64 / 2.0, x / 2.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (k, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + k as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..10_000 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (h.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// `N^{-1/2} sum a_i / s` with `s^2 = N^{-1} sum a_i^2`; zero when every
/// component vanishes.
fn standardized_mean(components: &[f64]) -> f64 {
    let n = components.len() as f64;
    let second = compensated_sum(components.iter().map(|a| a * a)) / n;
    if second <= 0.0 {
        return 0.0;
    }
    compensated_sum(components.iter().copied()) / (n.sqrt() * second.sqrt())
}

fn assemble(kind: TestKind, per_unit: Vec<Vec<f64>>, p: usize, scope: TestScope) -> TestResult {
    let n_used = per_unit.len();
    let per_covariate: Vec<f64> = (0..p)
        .map(|j| {
            let centered: Vec<f64> = per_unit
                .iter()
                .map(|row| match kind {
                    TestKind::S => row[j] * row[j] - 1.0,
                    TestKind::R => row[j] - 1.0,
                })
                .collect();
            standardized_mean(&centered)
        })
        .collect();
    let statistic = per_covariate.iter().map(|s| s * s).sum::<f64>();
    TestResult {
        kind,
        statistic,
        df: p,
        p_value: chi2_sf(statistic, p),
        per_unit,
        per_covariate,
        scope,
        n_used,
    }
}

fn unit_components(data: &PanelData, i: usize, eps_i: &[f64], kind: TestKind) -> Result<Vec<f64>> {
    let score = unit_t(data, i, eps_i)?;
    Ok(match kind {
        TestKind::S => score.t.iter().copied().collect(),
        TestKind::R => score.r2.iter().map(|r| data.n_periods() as f64 * r).collect(),
    })
}

fn check_residuals(data: &PanelData, residuals: &ResidualMatrix) -> Result<()> {
    if residuals.eps.shape() != (data.n_units(), data.n_periods()) {
        return Err(Error::ShapeMismatch(format!(
            "residuals are {:?}, panel is {}x{}",
            residuals.eps.shape(),
            data.n_units(),
            data.n_periods()
        )));
    }
    Ok(())
}

fn test_units(data: &PanelData, residuals: &ResidualMatrix, units: &[usize], kind: TestKind, scope: TestScope) -> Result<TestResult> {
    check_residuals(data, residuals)?;
    if units.is_empty() {
        return Err(Error::EmptySubset);
    }
    let per_unit = units.iter().map(|&i| unit_components(data, i, &residuals.unit(i), kind)).collect::<Result<Vec<_>>>()?;
    Ok(assemble(kind, per_unit, data.n_covariates(), scope))
}

pub fn heterogeneity_test(data: &PanelData, residuals: &ResidualMatrix, kind: TestKind) -> Result<TestResult> {
    let units: Vec<usize> = (0..data.n_units()).collect();
    test_units(data, residuals, &units, kind, TestScope::CrossSection)
}

/// Cross-sectional test based on standardized auxiliary t-scores.
pub fn s_test(data: &PanelData, residuals: &ResidualMatrix) -> Result<TestResult> {
    heterogeneity_test(data, residuals, TestKind::S)
}

/// Cross-sectional test based on auxiliary R-squared values.
pub fn r_test(data: &PanelData, residuals: &ResidualMatrix) -> Result<TestResult> {
    heterogeneity_test(data, residuals, TestKind::R)
}

/// Runs the test inside each estimated group using residuals from the
/// group centers. Small or degenerate groups are reported, not fatal.
pub fn within_group_tests(data: &PanelData, fit: &FitResult, kind: TestKind) -> Result<Vec<GroupTest>> {
    let residuals = residuals_from_centers(data, &fit.centers, &fit.assignment)?;
    within_group_tests_with(data, &residuals, &fit.assignment.group_of, fit.assignment.k(), kind)
}

pub fn within_group_tests_with(data: &PanelData, residuals: &ResidualMatrix, group_of: &[usize], k: usize, kind: TestKind) -> Result<Vec<GroupTest>> {
    if group_of.len() != data.n_units() {
        return Err(Error::LengthMismatch(data.n_units(), group_of.len()));
    }
    let mut out = Vec::with_capacity(k);
    for g in 0..k {
        let members: Vec<usize> = (0..group_of.len()).filter(|&i| group_of[i] == g).collect();
        if members.len() < MIN_GROUP_SIZE {
            out.push(GroupTest::Skipped {
                group: g,
                size: members.len(),
                reason: format!("fewer than {MIN_GROUP_SIZE} units"),
            });
            continue;
        }
        match test_units(data, residuals, &members, kind, TestScope::Group(g)) {
            Ok(r) => out.push(GroupTest::Tested(r)),
            Err(e @ (Error::DegenerateResiduals(_) | Error::SingularGram(_))) => out.push(GroupTest::Skipped {
                group: g,
                size: members.len(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{Centers, GroupAssignment};
    use crate::panel::{CoefficientMatrix, EstimatorTag, ResidualSource};
    use crate::rng::stream;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn normal_panel(n: usize, t: usize, p: usize, seed: u64) -> PanelData {
        let mut rng = stream(seed);
        let x: Vec<f64> = (0..n * t * p).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n * t).map(|_| rng.sample(StandardNormal)).collect();
        PanelData::new(n, t, p, y, x).unwrap()
    }

    fn residual_matrix(n: usize, t: usize, f: impl FnMut(usize, usize) -> f64) -> ResidualMatrix {
        ResidualMatrix {
            eps: DMatrix::from_fn(n, t, f),
            source: ResidualSource::Pooled,
        }
    }

    #[test]
    fn chi2_reference_points() {
        assert!((chi2_sf(3.841, 1) - 0.05).abs() < 5e-4);
        assert!((chi2_sf(5.991, 2) - 0.05).abs() < 5e-4);
        for d in 1..6 {
            assert_eq!(chi2_sf(0.0, d), 1.0);
        }
        assert!((chi2_sf(2.0, 2) - (-1.0f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn chi2_matches_statrs() {
        for df in [1usize, 2, 3, 5, 10, 30] {
            let dist = ChiSquared::new(df as f64).unwrap();
            for &x in &[1e-6, 0.01, 0.5, 1.0, 2.5, 3.841, 7.0, 15.0, 40.0, 90.0] {
                let expect = 1.0 - dist.cdf(x);
                let got = chi2_sf(x, df);
                assert!((got - expect).abs() < 1e-10, "df {df} x {x}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(10.0) - 362_880.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_residuals_give_zero_t() {
        let d = PanelData::new(1, 4, 1, vec![0.0; 4], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let s = unit_t(&d, 0, &[1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(s.t[0], 0.0);
        assert!(s.sigma_hat > 0.0);
    }

    #[test]
    fn perfect_auxiliary_fit_is_degenerate() {
        let d = PanelData::new(1, 4, 1, vec![0.0; 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        assert!(matches!(unit_t(&d, 0, &[1.0, 2.0, -1.0, 0.5]), Err(Error::DegenerateResiduals(0))));
    }

    #[test]
    fn t_matches_single_covariate_formula() {
        let d = normal_panel(1, 30, 1, 3);
        let mut rng = stream(4);
        let e: Vec<f64> = (0..30).map(|_| rng.sample(StandardNormal)).collect();
        let x = d.x_unit(0);
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let xe: f64 = x.iter().zip(&e).map(|(a, b)| a * b).sum();
        let g = xe / xx;
        let vv: f64 = e.iter().zip(x).map(|(e, x)| (e - g * x).powi(2)).sum();
        let sigma = (vv / 30.0).sqrt();
        let s = unit_t(&d, 0, &e).unwrap();
        assert!((s.t[0] - xe / (sigma * xx.sqrt())).abs() < 1e-12);
        let ee: f64 = e.iter().map(|v| v * v).sum();
        assert!((s.r2[0] - g * g * xx / ee).abs() < 1e-14);
    }

    #[test]
    fn t_is_scale_invariant() {
        let d = normal_panel(1, 25, 2, 5);
        let mut rng = stream(6);
        let e: Vec<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
        let base = unit_t(&d, 0, &e).unwrap();
        for c in [1e-3, 0.7, 42.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            let s = unit_t(&d, 0, &scaled).unwrap();
            assert!((s.t - &base.t).amax() < 1e-10);
        }
    }

    #[test]
    fn null_t_has_unit_variance() {
        let d = normal_panel(1, 50, 1, 7);
        let mut rng = stream(8);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                let e: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
                unit_t(&d, 0, &e).unwrap().t[0]
            })
            .collect();
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        let v = draws.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((0.9..=1.1).contains(&v), "variance {v}");
    }

    #[test]
    fn orthogonal_residuals_closed_form() {
        // x alternates sign and residuals are constant per unit, so every t and r^2 is 0
        let (n, t) = (9, 4);
        let x: Vec<f64> = (0..n * t).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let d = PanelData::new(n, t, 1, vec![0.0; n * t], x).unwrap();
        let res = residual_matrix(n, t, |i, _| 1.0 + i as f64);
        for r in [s_test(&d, &res).unwrap(), r_test(&d, &res).unwrap()] {
            // a_i = -1 for all units, s = 1, so S = -N / sqrt(N)
            assert!((r.per_covariate[0] + (n as f64).sqrt()).abs() < 1e-12);
            assert!((r.statistic - n as f64).abs() < 1e-12);
            assert_eq!(r.df, 1);
            assert!((r.p_value - chi2_sf(n as f64, 1)).abs() < 1e-15);
        }
    }

    #[test]
    fn statistic_matches_direct_formula() {
        let (n, t) = (40, 20);
        let d = normal_panel(n, t, 2, 11);
        let mut rng = stream(12);
        let res = residual_matrix(n, t, |_, _| rng.sample(StandardNormal));
        let s = s_test(&d, &res).unwrap();
        let r = r_test(&d, &res).unwrap();
        let mut total_s = 0.0;
        let mut total_r = 0.0;
        for j in 0..2 {
            let a: Vec<f64> = (0..n).map(|i| unit_t(&d, i, &res.unit(i)).unwrap().t[j].powi(2) - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| t as f64 * unit_t(&d, i, &res.unit(i)).unwrap().r2[j] - 1.0).collect();
            let f = |v: &[f64]| v.iter().sum::<f64>() / ((n as f64).sqrt() * (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt());
            total_s += f(&a).powi(2);
            total_r += f(&b).powi(2);
        }
        assert!((s.statistic - total_s).abs() < 1e-10);
        assert!((r.statistic - total_r).abs() < 1e-10);
        assert_eq!(s.df, 2);
        assert_eq!(s.n_used, n);
    }

    #[test]
    fn single_group_matches_cross_section() {
        let (n, t) = (30, 15);
        let d = normal_panel(n, t, 1, 13);
        let mut rng = stream(14);
        let res = residual_matrix(n, t, |_, _| rng.sample(StandardNormal));
        let whole = s_test(&d, &res).unwrap();
        let groups = within_group_tests_with(&d, &res, &vec![0; n], 1, TestKind::S).unwrap();
        let g = groups[0].result().unwrap();
        assert_eq!(g.statistic, whole.statistic);
        assert_eq!(g.scope, TestScope::Group(0));
    }

    #[test]
    fn small_and_exact_groups_are_skipped() {
        let (n, t) = (25, 8);
        let mut rng = stream(15);
        let x: Vec<f64> = (0..n * t).map(|_| rng.sample(StandardNormal)).collect();
        let labels: Vec<usize> = (0..n).map(|i| if i < 20 { 0 } else { 1 }).collect();
        let y: Vec<f64> = (0..n * t).map(|k| if labels[k / t] == 0 { 0.5 * x[k] } else { 2.0 * x[k] + rng.sample::<f64, _>(StandardNormal) }).collect();
        let d = PanelData::new(n, t, 1, y, x).unwrap();
        let fit = FitResult {
            beta: CoefficientMatrix::new(DMatrix::zeros(n, 1), EstimatorTag::Truth),
            pre_snap_beta: None,
            centers: Centers::new(DMatrix::from_column_slice(2, 1, &[0.5, 2.0])),
            assignment: GroupAssignment::from_labels(labels, 2),
            lambda: 0.0,
            objective_trace: vec![],
            converged: true,
            iterations: 0,
        };
        let out = within_group_tests(&d, &fit, TestKind::S).unwrap();
        assert!(matches!(out[0], GroupTest::Skipped { group: 0, size: 20, .. }));
        assert!(matches!(out[1], GroupTest::Skipped { group: 1, size: 5, .. }));
    }

    #[test]
    fn stars_follow_levels() {
        assert_eq!(stars(0.005), "***");
        assert_eq!(stars(0.03), "**");
        assert_eq!(stars(0.07), "*");
        assert_eq!(stars(0.5), "");
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }
}
