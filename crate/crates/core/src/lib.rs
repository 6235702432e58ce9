//! Estimation of linear panel models whose slopes cluster into a few latent
//! groups while still varying within each group.
//!
//! The usual pipeline is: load a balanced panel ([`io::read_panel`]), remove
//! unit effects ([`within_transform`]), choose the number of groups
//! ([`selection::gap_statistic`] on unit OLS slopes), fit one of the grouped
//! estimators ([`estimators`], [`clustering::feasible_kmeans`]) and test for
//! remaining heterogeneity ([`hettest`]). [`sim`] reproduces the Monte Carlo
//! design used to benchmark all of this.

pub mod clustering;
pub mod error;
pub mod estimators;
pub mod hettest;
pub mod io;
pub mod panel;
pub mod rng;
pub mod selection;
pub mod sim;

pub use clustering::{classify, feasible_kmeans, kmeans, rand_index, Centers, GroupAssignment, KmeansSolution, PointSet};
pub use error::{Error, GramScope, Result};
pub use estimators::{classo_fit, cross_validate_lambda, hssp_fit, kmeans_lasso_fit, CvReport, FitResult, OptimOptions};
pub use hettest::{chi2_sf, r_test, s_test, within_group_tests, TestResult};
pub use panel::{mean_group, pooled_ols, unit_ols, within_transform, CoefficientMatrix, EstimatorTag, PanelData};
pub use selection::{gap_statistic, index_select, GapResult, IndexScores, SelectionMethod};
