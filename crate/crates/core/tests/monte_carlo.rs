//! Seeded Monte Carlo checks of estimator, selection and test behavior.
//! Reported tables use the default design: centers 0.5 and 2, slope
//! deviations of variance 0.2, unit-variance noise.

use hetgroups::estimators::{cross_validate_lambda_with, lambda_grid, OptimOptions};
use hetgroups::hettest::s_test;
use hetgroups::panel::residuals_from_centers;
use hetgroups::rng::derive_seed;
use hetgroups::selection::SelectionMethod;
use hetgroups::sim::{generate_dgp, run_replications, MetricsTable, Regime, SimConfig, SimTest};
use hetgroups::{feasible_kmeans, within_transform, EstimatorTag};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn config(n: usize, t: usize, reps: usize, seed: u64) -> SimConfig {
    SimConfig {
        n_units: n,
        n_periods: t,
        reps,
        master_seed: seed,
        estimators: vec![],
        tests: vec![],
        selection: vec![],
        ..SimConfig::default()
    }
}

fn run(cfg: &SimConfig) -> MetricsTable {
    run_replications(cfg).unwrap()
}

#[test]
fn cv_prefers_the_largest_penalty_without_signal() {
    // All slopes are zero, so the single-group model is correctly specified.
    let cfg = SimConfig {
        k_true: 1,
        centers_true: vec![vec![0.0]],
        ..SimConfig::default()
    };
    let trials = 40u64;
    let mut hits = 0;
    for r in 0..trials {
        let (raw, _) = generate_dgp(&cfg, 50, 60, Regime::Null, derive_seed(41, r)).unwrap();
        let d = within_transform(&raw).unwrap();
        let opts = OptimOptions { seed: r, ..Default::default() };
        // Snapped SSP fits coincide across the grid, so their losses tie; Km
        // keeps unit slopes and shows the shrinkage preference directly.
        let cv = cross_validate_lambda_with(&d, 1, EstimatorTag::KmeansLasso, 10, &opts).unwrap();
        if cv.selected_lambda == *lambda_grid(60).last().unwrap() {
            hits += 1;
        }
    }
    assert!(hits as f64 >= 0.6 * trials as f64, "grid maximum chosen in {hits}/{trials} trials");
}

#[test]
fn hssp_beats_snapped_slopes_under_heterogeneity() {
    let cfg = SimConfig {
        regimes: vec![Regime::Alternative],
        estimators: vec![EstimatorTag::Classo, EstimatorTag::Hssp],
        ..config(60, 60, 40, 42)
    };
    let t = run(&cfg);
    let ssp = t.estimator(60, 60, Regime::Alternative, EstimatorTag::Classo).unwrap().mse_beta;
    let hssp = t.estimator(60, 60, Regime::Alternative, EstimatorTag::Hssp).unwrap().mse_beta;
    assert!(hssp < ssp, "H-SSP {hssp} vs SSP {ssp}");
}

#[test]
fn ssp_is_accurate_on_long_homogeneous_panels() {
    let cfg = SimConfig {
        regimes: vec![Regime::Null],
        estimators: vec![EstimatorTag::Classo],
        ..config(100, 500, 200, 43)
    };
    let mse = run(&cfg).estimator(100, 500, Regime::Null, EstimatorTag::Classo).unwrap().mse_beta;
    assert!(mse <= 0.001, "{mse}");
}

#[test]
fn km_slope_error_under_heterogeneity() {
    let cfg = SimConfig {
        regimes: vec![Regime::Alternative],
        estimators: vec![EstimatorTag::KmeansLasso],
        ..config(100, 200, 200, 44)
    };
    let mse = run(&cfg).estimator(100, 200, Regime::Alternative, EstimatorTag::KmeansLasso).unwrap().mse_beta;
    assert!((0.055..=0.10).contains(&mse), "{mse}");
}

#[test]
fn selection_frequencies_on_long_heterogeneous_panels() {
    let cfg = SimConfig {
        n_units: 200,
        n_periods: 200,
        regimes: vec![Regime::Alternative],
        selection: vec![SelectionMethod::Gap, SelectionMethod::Silhouette, SelectionMethod::Db],
        ..config(200, 200, 200, 45)
    };
    let t = run(&cfg);
    let freq = |m| t.selection_row(200, 200, Regime::Alternative, m).unwrap().frequency(2);
    let (gap, sil, db) = (freq(SelectionMethod::Gap), freq(SelectionMethod::Silhouette), freq(SelectionMethod::Db));
    assert!(sil >= 0.95, "silhouette {sil}");
    assert!(db >= 0.90, "db {db}");
    assert!(gap >= 0.88, "gap {gap} (silhouette {sil}, db {db})");
}

#[test]
fn cross_sectional_tests_have_full_power() {
    let s_cfg = SimConfig {
        regimes: vec![Regime::Alternative],
        tests: vec![SimTest::S],
        ..config(100, 100, 200, 46)
    };
    let s = run(&s_cfg).test(100, 100, Regime::Alternative, SimTest::S).unwrap().rejection_rate;
    assert!(s >= 0.99, "s-test power {s}");
    let r_cfg = SimConfig {
        regimes: vec![Regime::Alternative],
        tests: vec![SimTest::R],
        ..config(500, 500, 100, 47)
    };
    let r = run(&r_cfg).test(500, 500, Regime::Alternative, SimTest::R).unwrap().rejection_rate;
    assert!(r >= 0.99, "r-test power {r}");
}

#[test]
fn within_group_s_test_power_and_size() {
    let power_cfg = SimConfig {
        regimes: vec![Regime::Alternative],
        tests: vec![SimTest::SWithin],
        ..config(500, 500, 100, 48)
    };
    let power = run(&power_cfg).test(500, 500, Regime::Alternative, SimTest::SWithin).unwrap().rejection_rate;
    assert!(power >= 0.85, "within-group power {power}");
    let size_cfg = SimConfig {
        regimes: vec![Regime::Null],
        tests: vec![SimTest::SWithin],
        ..config(1000, 1000, 100, 49)
    };
    let size = run(&size_cfg).test(1000, 1000, Regime::Null, SimTest::SWithin).unwrap().rejection_rate;
    assert!((0.02..=0.10).contains(&size), "within-group size {size}");
}

/// Kolmogorov-Smirnov distance between a sample and the standard normal.
fn ks_distance(mut sample: Vec<f64>) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    sample.sort_by(|a, b| a.total_cmp(b));
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn null_s_statistic_is_standard_normal() {
    let cfg = SimConfig::default();
    let reps = 1000u64;
    let stats: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(50, r);
            let (raw, _) = generate_dgp(&cfg, 1000, 500, Regime::Null, seed).unwrap();
            let d = within_transform(&raw).unwrap();
            let fit = feasible_kmeans(&d, 2, seed).unwrap();
            let res = residuals_from_centers(&d, &fit.centers, &fit.assignment).unwrap();
            s_test(&d, &res).unwrap().per_covariate[0]
        })
        .collect();
    let d = ks_distance(stats);
    // Asymptotic 1% critical value of the one-sample KS statistic.
    let critical = 1.6276 / (reps as f64).sqrt();
    assert!(d < critical, "KS distance {d} vs critical {critical}");
}

#[test]
fn s_test_power_grows_with_slope_dispersion() {
    let rates: Vec<f64> = [0.0, 0.05, 0.2]
        .iter()
        .map(|&v| {
            let cfg = SimConfig {
                eta_variance: v,
                regimes: vec![Regime::Alternative],
                tests: vec![SimTest::S],
                ..config(500, 500, 200, 51)
            };
            run(&cfg).test(500, 500, Regime::Alternative, SimTest::S).unwrap().rejection_rate
        })
        .collect();
    assert!(rates.windows(2).all(|w| w[0] <= w[1]), "{rates:?}");
}
