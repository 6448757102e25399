//! Rosenthal's fail-safe number for meta-analysis: point estimate, moments
//! under fixed and Poisson study counts, confidence intervals, the `5k + 10`
//! test, cutoff tables, and a Monte Carlo coverage harness.

pub mod dist;
pub mod error;
pub mod estimators;
pub mod failsafe;
pub mod inference;
pub mod io;
pub mod simlab;

pub use dist::{DistributionSpec, RandomSource};
pub use error::{Error, Result};
pub use estimators::{
    distributional_params, moments_estimate, skew_normal_mom_fit, Assumption, KModel,
    ParameterTriple, SkewNormalFit, ZSample,
};
pub use failsafe::{
    invert_nr, iyengar_greenhouse_n, moments_fixed, moments_fixed_exact, moments_fixed_largek,
    moments_random, nr_joint_pdf, nr_pdf, rosenthal_nr, true_nr, FailSafeEstimate, MomentReport,
    StudyCount, Variant,
};
pub use inference::{
    ci_bootstrap, ci_from_summary, ci_normal, cutoff_table, failsafe_test, BootstrapOptions,
    Interval, VarianceModel,
};
pub use simlab::{run_grid, run_scenario, CiKind, CoverageReport, CoverageScenario, Truth};
