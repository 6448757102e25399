//! Monte Carlo coverage study for the fail-safe confidence intervals.
//!
//! Each scenario fixes a data-generating distribution, a distributional
//! assumption (the "column"), a CI recipe and a study-count model, and
//! reports the fraction of replicates whose interval contains the true
//! expected fail-safe number, for every nominal `k`.
//!
//! Replicate `i` of the cell for nominal `k` draws everything from
//! `RandomSource::new(mix_seed(seed, k), i)`, so results do not depend on
//! scheduling or on the number of worker threads.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{mix_seed, DistributionSpec, PoissonSampler, RandomSource, Sampler};
use crate::error::{Error, Result};
use crate::estimators::{
    moments_estimate, Assumption, KModel, ParameterTriple, Provenance, ZSample,
};
use crate::failsafe::{moments_fixed, moments_random, true_nr, StudyCount, Variant};
use crate::inference::{ci_bootstrap, BootstrapOptions, VarianceModel, MIN_BOOTSTRAP_REPLICATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiKind {
    Distribution,
    Moment,
    Bootstrap,
}

impl fmt::Display for CiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CiKind::Distribution => "distribution",
            CiKind::Moment => "moment",
            CiKind::Bootstrap => "bootstrap",
        })
    }
}

impl FromStr for CiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "distribution" | "dist" => Ok(CiKind::Distribution),
            "moment" => Ok(CiKind::Moment),
            "bootstrap" | "boot" => Ok(CiKind::Bootstrap),
            other => Err(Error::InvalidConfig(format!("unknown CI kind `{other}`"))),
        }
    }
}

/// Where the coverage target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truth {
    /// Expected fail-safe number at the assumption's `(mu, sigma2)`.
    Column,
    /// Expected fail-safe number at the generating distribution's moments.
    Generating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageScenario {
    pub data_dist: DistributionSpec,
    pub assumption: Assumption,
    pub ci: CiKind,
    /// Fixed-k variance formula for distribution and moment intervals.
    pub variant: Variant,
    pub truth: Truth,
    pub k_values: Vec<u64>,
    pub k_model: KModel,
    pub replicates: usize,
    pub boot_replicates: usize,
    pub level: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl CoverageScenario {
    pub fn new(data_dist: DistributionSpec, assumption: Assumption, ci: CiKind) -> Self {
        Self {
            data_dist,
            assumption,
            ci,
            variant: Variant::LargeK,
            truth: Truth::Column,
            k_values: vec![5, 15, 30, 50],
            k_model: KModel::Fixed,
            replicates: 2000,
            boot_replicates: 500,
            level: 0.95,
            alpha: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_dist.validate()?;
        if matches!(self.data_dist, DistributionSpec::Poisson { .. }) {
            return Err(Error::InvalidConfig(
                "data distribution must be continuous".into(),
            ));
        }
        if self.replicates < 100 {
            return Err(Error::InvalidConfig(format!(
                "replicates must be at least 100, got {}",
                self.replicates
            )));
        }
        if self.ci == CiKind::Bootstrap && self.boot_replicates < MIN_BOOTSTRAP_REPLICATES {
            return Err(Error::InvalidConfig(format!(
                "bootstrap replicates must be at least {MIN_BOOTSTRAP_REPLICATES}, got {}",
                self.boot_replicates
            )));
        }
        if !(self.level > 0.5 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "level must lie in (0.5,1), got {}",
                self.level
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in (0,0.5], got {}",
                self.alpha
            )));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::InvalidConfig(
                "k values must be nonempty and positive".into(),
            ));
        }
        let min_k = if self.ci == CiKind::Distribution {
            1
        } else {
            2
        };
        if self.k_model == KModel::Fixed && self.k_values.iter().any(|&k| k < min_k) {
            return Err(Error::InvalidConfig(format!(
                "{} intervals need k >= {min_k}",
                self.ci
            )));
        }
        if self.assumption == Assumption::SkewNormalFit && self.truth == Truth::Column {
            return Err(Error::InvalidConfig(
                "a fitted assumption has no column truth; use the generating truth".into(),
            ));
        }
        Ok(())
    }

    /// The interval recipe as a variance-model descriptor.
    pub fn variance_model(&self) -> VarianceModel {
        match (self.ci, self.k_model) {
            (CiKind::Distribution, KModel::Fixed) => VarianceModel::FixedDistribution {
                assumption: self.assumption,
                variant: self.variant,
            },
            (CiKind::Distribution, KModel::Random) => VarianceModel::RandomDistribution {
                assumption: self.assumption,
            },
            (CiKind::Moment, KModel::Fixed) => VarianceModel::FixedMoment {
                variant: self.variant,
            },
            (CiKind::Moment, KModel::Random) => VarianceModel::RandomMoment,
            (CiKind::Bootstrap, _) => VarianceModel::Bootstrap {
                replicates: self.boot_replicates,
            },
        }
    }

    fn truth_params(&self, k: u64) -> Result<ParameterTriple> {
        let (mu, sigma2) = match self.truth {
            Truth::Column => self.assumption.moments().ok_or_else(|| {
                Error::InvalidConfig("fitted assumption has no column truth".into())
            })?,
            Truth::Generating => self.data_dist.moments(),
        };
        Ok(ParameterTriple {
            mu,
            sigma2,
            lambda: k as f64,
            provenance: Provenance::MoM,
        })
    }

    /// Expected fail-safe number the intervals are scored against.
    pub fn true_value(&self, k: u64) -> Result<f64> {
        let count = match self.k_model {
            KModel::Fixed => StudyCount::Fixed(k),
            KModel::Random => StudyCount::Random,
        };
        true_nr(&self.truth_params(k)?, count, self.alpha)
    }
}

pub fn data_dist_label(d: &DistributionSpec) -> String {
    match *d {
        DistributionSpec::StandardNormal => "std-normal".into(),
        DistributionSpec::HalfNormal { sigma_f: 1.0 } => "half-normal".into(),
        DistributionSpec::SkewNormal { xi, omega, delta } if xi == 0.0 && omega == 1.0 => {
            format!("skew-normal({delta})")
        }
        other => format!("{other:?}"),
    }
}

pub fn parse_data_dist(s: &str) -> Result<DistributionSpec> {
    match s.trim().parse::<Assumption>()? {
        Assumption::StdNormal => Ok(DistributionSpec::StandardNormal),
        Assumption::HalfNormal => Ok(DistributionSpec::half_normal()),
        Assumption::SkewNormalFixed(d) => Ok(DistributionSpec::skew_normal(d)),
        Assumption::SkewNormalFit => Err(Error::InvalidConfig(
            "skew-normal-fit is not a data distribution".into(),
        )),
    }
}

pub fn k_model_label(m: KModel) -> &'static str {
    match m {
        KModel::Fixed => "fixed",
        KModel::Random => "random",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub k: u64,
    pub coverage: f64,
    /// Binomial standard error `sqrt(c (1 - c) / n)`.
    pub mc_se: f64,
    pub true_value: f64,
    /// Replicates whose interval could not be formed (scored as not covering).
    pub failures: usize,
    pub replicates: usize,
    /// Replicates whose combined test was not significant.
    pub below_threshold: usize,
    /// Random-k draws below 2 that were redrawn.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub scenario: CoverageScenario,
    pub cells: Vec<CoverageCell>,
}

impl CoverageReport {
    pub fn data_label(&self) -> String {
        data_dist_label(&self.scenario.data_dist)
    }

    /// Interval recipe plus the assumption that sets the target.
    pub fn method_label(&self) -> String {
        let s = &self.scenario;
        match s.ci {
            CiKind::Distribution => s.variance_model().to_string(),
            _ => format!("{}@{}", s.variance_model(), s.assumption),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    covered: usize,
    failures: usize,
    below: usize,
    redraws: usize,
}

impl Tally {
    fn merge(self, o: Tally) -> Tally {
        Tally {
            covered: self.covered + o.covered,
            failures: self.failures + o.failures,
            below: self.below + o.below,
            redraws: self.redraws + o.redraws,
        }
    }
}

struct CellContext<'a> {
    scenario: &'a CoverageScenario,
    sampler: Sampler,
    poisson: Option<PoissonSampler>,
    za: f64,
    truth: f64,
    k: u64,
    cell_seed: u64,
}

impl CellContext<'_> {
    fn interval_variance(&self, sample: &ZSample, k: u64) -> Result<f64> {
        let s = self.scenario;
        let alpha = s.alpha;
        let params = match s.ci {
            CiKind::Distribution => s.assumption.resolve(sample)?,
            CiKind::Moment => moments_estimate(sample, s.k_model)?,
            CiKind::Bootstrap => unreachable!(),
        };
        let report = match s.k_model {
            KModel::Fixed => moments_fixed(&params, k, alpha, s.variant)?,
            KModel::Random => moments_random(&params.with_lambda(k as f64), alpha)?,
        };
        Ok(report.variance.max(0.0))
    }

    /// Score replicate `i`; returns a tally with at most one count per field
    /// except `redraws`.
    fn replicate(&self, i: u64, q: f64) -> Tally {
        let s = self.scenario;
        let mut src = RandomSource::new(self.cell_seed, i);
        let mut t = Tally::default();
        let k = match &self.poisson {
            None => self.k,
            Some(p) => loop {
                let k = p.draw(&mut src);
                if k >= 2 {
                    break k;
                }
                t.redraws += 1;
            },
        };
        let mut z = vec![0.0; k as usize];
        self.sampler.fill(&mut z, &mut src);
        let sum: f64 = z.iter().sum();
        let kf = k as f64;
        let n_raw = sum * sum / (self.za * self.za) - kf;
        if sum < self.za * kf.sqrt() {
            t.below = 1;
        }
        let sample = match ZSample::new(z, s.alpha) {
            Ok(v) => v,
            Err(_) => {
                t.failures = 1;
                return t;
            }
        };
        let interval = match s.ci {
            CiKind::Bootstrap => {
                let opts = BootstrapOptions {
                    replicates: s.boot_replicates,
                    level: s.level,
                    clamp: false,
                };
                ci_bootstrap(&sample, &opts, &mut src).map(|b| (b.interval.lower, b.interval.upper))
            }
            _ => self.interval_variance(&sample, k).map(|v| {
                let half = q * v.sqrt();
                (n_raw - half, n_raw + half)
            }),
        };
        match interval {
            Ok((lo, hi)) => {
                if lo <= self.truth && self.truth <= hi {
                    t.covered = 1;
                }
            }
            Err(_) => t.failures = 1,
        }
        t
    }
}

/// Per-cell seed for nominal `k`.
pub fn cell_seed(seed: u64, k: u64) -> u64 {
    mix_seed(seed, k)
}

fn run_cell(scenario: &CoverageScenario, k: u64) -> Result<CoverageCell> {
    let za = crate::dist::z_alpha(scenario.alpha)?;
    let q = crate::dist::std_normal_quantile(0.5 * (1.0 + scenario.level))?;
    let ctx = CellContext {
        scenario,
        sampler: scenario.data_dist.sampler()?,
        poisson: match scenario.k_model {
            KModel::Fixed => None,
            KModel::Random => Some(PoissonSampler::new(k as f64)?),
        },
        za,
        truth: scenario.true_value(k)?,
        k,
        cell_seed: cell_seed(scenario.seed, k),
    };
    let n = scenario.replicates;
    let t = (0..n as u64)
        .into_par_iter()
        .map(|i| ctx.replicate(i, q))
        .reduce(Tally::default, Tally::merge);
    let coverage = t.covered as f64 / n as f64;
    Ok(CoverageCell {
        k,
        coverage,
        mc_se: (coverage * (1.0 - coverage) / n as f64).sqrt(),
        true_value: ctx.truth,
        failures: t.failures,
        replicates: n,
        below_threshold: t.below,
        redraws: t.redraws,
    })
}

/// Score one replicate in isolation (same draws as inside `run_scenario`).
pub fn replicate_covers(scenario: &CoverageScenario, k: u64, index: u64) -> Result<Option<bool>> {
    scenario.validate()?;
    let ctx = CellContext {
        scenario,
        sampler: scenario.data_dist.sampler()?,
        poisson: match scenario.k_model {
            KModel::Fixed => None,
            KModel::Random => Some(PoissonSampler::new(k as f64)?),
        },
        za: crate::dist::z_alpha(scenario.alpha)?,
        truth: scenario.true_value(k)?,
        k,
        cell_seed: cell_seed(scenario.seed, k),
    };
    let q = crate::dist::std_normal_quantile(0.5 * (1.0 + scenario.level))?;
    let t = ctx.replicate(index, q);
    Ok(if t.failures > 0 {
        None
    } else {
        Some(t.covered == 1)
    })
}

/// Run on the current rayon pool.
pub fn run_scenario(scenario: &CoverageScenario) -> Result<CoverageReport> {
    scenario.validate()?;
    let cells = scenario
        .k_values
        .iter()
        .map(|&k| run_cell(scenario, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageReport {
        scenario: scenario.clone(),
        cells,
    })
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
            .map(|pool| pool.install(f)),
    }
}

/// `run_scenario` on a dedicated pool of `threads` workers (`None`: global pool).
pub fn run_scenario_with_threads(
    scenario: &CoverageScenario,
    threads: Option<usize>,
) -> Result<CoverageReport> {
    with_pool(threads, || run_scenario(scenario))?
}

/// Run every scenario; a failing scenario does not stop the others.
pub fn run_grid(
    scenarios: &[CoverageScenario],
    threads: Option<usize>,
) -> Vec<Result<CoverageReport>> {
    with_pool(threads, || scenarios.iter().map(run_scenario).collect())
        .unwrap_or_else(|e| scenarios.iter().map(|_| Err(e.clone())).collect())
}

pub const PAPER_K_VALUES: [u64; 4] = [5, 15, 30, 50];

fn paper_columns() -> [Assumption; 4] {
    [
        Assumption::StdNormal,
        Assumption::HalfNormal,
        Assumption::SkewNormalFixed(-0.5),
        Assumption::SkewNormalFixed(0.5),
    ]
}

/// Full coverage grid: 4 data distributions × 4 assumption columns ×
/// {fixed, random} × {distribution, moment, bootstrap}. Scenario `j` is seeded
/// with `mix_seed(master_seed, j)`.
pub fn paper_grid(
    master_seed: u64,
    replicates: usize,
    boot_replicates: usize,
) -> Vec<CoverageScenario> {
    let data = [
        DistributionSpec::StandardNormal,
        DistributionSpec::half_normal(),
        DistributionSpec::skew_normal(-0.5),
        DistributionSpec::skew_normal(0.5),
    ];
    let mut out = Vec::with_capacity(96);
    for d in data {
        for k_model in [KModel::Fixed, KModel::Random] {
            for ci in [CiKind::Distribution, CiKind::Moment, CiKind::Bootstrap] {
                for a in paper_columns() {
                    let mut s = CoverageScenario::new(d, a, ci);
                    s.k_model = k_model;
                    s.replicates = replicates;
                    s.boot_replicates = boot_replicates;
                    s.seed = mix_seed(master_seed, out.len() as u64);
                    out.push(s);
                }
            }
        }
    }
    out
}

pub const CSV_HEADER: [&str; 12] = [
    "data_dist",
    "k_model",
    "ci_method",
    "k",
    "coverage",
    "mc_se",
    "true_value",
    "failures",
    "replicates",
    "assumption",
    "below_threshold",
    "redraws",
];

/// Coverage table, one row per (scenario, k).
pub fn write_coverage_csv<W: Write>(reports: &[CoverageReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        let s = &r.scenario;
        for c in &r.cells {
            w.write_record([
                r.data_label(),
                k_model_label(s.k_model).to_string(),
                s.variance_model().to_string(),
                c.k.to_string(),
                c.coverage.to_string(),
                c.mc_se.to_string(),
                c.true_value.to_string(),
                c.failures.to_string(),
                c.replicates.to_string(),
                s.assumption.to_string(),
                c.below_threshold.to_string(),
                c.redraws.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long-format plot data: `panel, ci_method, k, coverage`, one panel per
/// (data distribution, k model).
pub fn write_plot_data<W: Write>(reports: &[CoverageReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["panel", "ci_method", "k", "coverage"])?;
    for r in reports {
        let panel = format!("{}/{}", r.data_label(), k_model_label(r.scenario.k_model));
        for c in &r.cells {
            w.write_record([
                panel.clone(),
                r.method_label(),
                c.k.to_string(),
                c.coverage.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
