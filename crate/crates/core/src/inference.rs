//! Confidence intervals for the fail-safe number, the `5k + 10` test and the
//! cutoff table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{std_normal_quantile, RandomSource};
use crate::error::{Error, Result};
use crate::estimators::{distributional_params, moments_estimate, Assumption, KModel, ZSample};
use crate::failsafe::{
    moments_fixed, moments_random, rosenthal_nr, rule_of_thumb, FailSafeEstimate, Variant,
};

pub const MIN_BOOTSTRAP_REPLICATES: usize = 100;

/// Which variance feeds the normal-approximation interval.
///
/// The textual descriptor form is used on the command line and in reports:
/// `fixed-dist:<assumption>[:exact|:largek]`, `fixed-moment[:exact|:largek]`,
/// `random-dist:<assumption>`, `random-moment`, `bootstrap[:<replicates>]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum VarianceModel {
    FixedDistribution {
        assumption: Assumption,
        variant: Variant,
    },
    FixedMoment {
        variant: Variant,
    },
    RandomDistribution {
        assumption: Assumption,
    },
    RandomMoment,
    Bootstrap {
        replicates: usize,
    },
}

impl VarianceModel {
    pub fn is_bootstrap(&self) -> bool {
        matches!(self, VarianceModel::Bootstrap { .. })
    }

    /// Short family name without parameters.
    pub fn tag(&self) -> &'static str {
        match self {
            VarianceModel::FixedDistribution { .. } => "fixed-dist",
            VarianceModel::FixedMoment { .. } => "fixed-moment",
            VarianceModel::RandomDistribution { .. } => "random-dist",
            VarianceModel::RandomMoment => "random-moment",
            VarianceModel::Bootstrap { .. } => "bootstrap",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            VarianceModel::Bootstrap { replicates } if replicates < MIN_BOOTSTRAP_REPLICATES => {
                Err(Error::InvalidConfig(format!(
                    "bootstrap needs at least {MIN_BOOTSTRAP_REPLICATES} replicates, got {replicates}"
                )))
            }
            VarianceModel::FixedDistribution {
                assumption: Assumption::SkewNormalFixed(d),
                ..
            }
            | VarianceModel::RandomDistribution {
                assumption: Assumption::SkewNormalFixed(d),
            } if d.is_nan() || d.abs() >= 1.0 => Err(Error::Domain(format!(
                "skew-normal delta must lie in (-1,1), got {d}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for VarianceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarianceModel::FixedDistribution {
                assumption,
                variant,
            } => {
                write!(f, "fixed-dist:{assumption}:{variant}")
            }
            VarianceModel::FixedMoment { variant } => write!(f, "fixed-moment:{variant}"),
            VarianceModel::RandomDistribution { assumption } => {
                write!(f, "random-dist:{assumption}")
            }
            VarianceModel::RandomMoment => f.write_str("random-moment"),
            VarianceModel::Bootstrap { replicates } => write!(f, "bootstrap:{replicates}"),
        }
    }
}

impl FromStr for VarianceModel {
    type Err = Error;

    /// Fixed-k models default to the large-k variance when no variant is given.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, rest) = s.split_once(':').unwrap_or((s, ""));
        let bad = || Error::InvalidConfig(format!("bad variance model `{s}`"));
        let model = match head {
            "fixed-dist" => {
                let (a, v) = match rest.rsplit_once(':') {
                    Some((a, v)) if v.parse::<Variant>().is_ok() => (a, v.parse()?),
                    _ => (rest, Variant::LargeK),
                };
                VarianceModel::FixedDistribution {
                    assumption: a.parse()?,
                    variant: v,
                }
            }
            "fixed-moment" => VarianceModel::FixedMoment {
                variant: if rest.is_empty() {
                    Variant::LargeK
                } else {
                    rest.parse()?
                },
            },
            "random-dist" => VarianceModel::RandomDistribution {
                assumption: rest.parse()?,
            },
            "random-moment" if rest.is_empty() => VarianceModel::RandomMoment,
            "bootstrap" => VarianceModel::Bootstrap {
                replicates: if rest.is_empty() {
                    1000
                } else {
                    rest.parse().map_err(|_| bad())?
                },
            },
            _ => return Err(bad()),
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<VarianceModel> for String {
    fn from(m: VarianceModel) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for VarianceModel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub center: f64,
    pub level: f64,
    pub method: VarianceModel,
    pub variance_used: f64,
    /// The lower endpoint is below zero; `max(0, lower)` is the natural display value.
    pub negative_lower: bool,
}

impl Interval {
    fn around(center: f64, variance: f64, level: f64, method: VarianceModel) -> Result<Self> {
        let q = two_sided_quantile(level)?;
        let half = q * variance.sqrt();
        let lower = center - half;
        Ok(Self {
            lower,
            upper: center + half,
            center,
            level,
            method,
            variance_used: variance,
            negative_lower: lower < 0.0,
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn display_lower(&self) -> f64 {
        self.lower.max(0.0)
    }
}

fn two_sided_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "level must lie in (0,1), got {level}"
        )));
    }
    std_normal_quantile(0.5 * (1.0 + level))
}

/// Variance of the fail-safe number under a non-bootstrap model.
///
/// Distribution-based models use only `k`; moment-based ones estimate
/// `(mu, sigma2)` from the sample. `alpha` is the fail-safe's one-sided level.
pub fn model_variance(model: &VarianceModel, sample: &ZSample) -> Result<f64> {
    model.validate()?;
    let k = sample.k() as u64;
    let alpha = sample.alpha();
    let report = match *model {
        VarianceModel::FixedDistribution {
            assumption,
            variant,
        } => moments_fixed(&assumption.resolve(sample)?, k, alpha, variant)?,
        VarianceModel::FixedMoment { variant } => {
            moments_fixed(&moments_estimate(sample, KModel::Fixed)?, k, alpha, variant)?
        }
        VarianceModel::RandomDistribution { assumption } => {
            moments_random(&assumption.resolve(sample)?, alpha)?
        }
        VarianceModel::RandomMoment => {
            moments_random(&moments_estimate(sample, KModel::Random)?, alpha)?
        }
        VarianceModel::Bootstrap { .. } => {
            return Err(Error::InvalidConfig(
                "bootstrap variance needs a random source; use ci_bootstrap".into(),
            ))
        }
    };
    Ok(report.variance.max(0.0))
}

/// `N ± q sqrt(Var)` with `q` the two-sided normal quantile for `level`.
pub fn ci_normal(
    estimate: &FailSafeEstimate,
    sample: &ZSample,
    model: VarianceModel,
    level: f64,
) -> Result<Interval> {
    let var = model_variance(&model, sample)?;
    Interval::around(estimate.n_r, var, level, model)
}

/// Normal-approximation interval from a summary `(k, N)` only; valid for
/// distribution-based models with a data-free assumption.
pub fn ci_from_summary(
    n_r: f64,
    k: u64,
    alpha: f64,
    model: VarianceModel,
    level: f64,
) -> Result<Interval> {
    model.validate()?;
    let report = match model {
        VarianceModel::FixedDistribution {
            assumption,
            variant,
        } => moments_fixed(&distributional_params(assumption, k)?, k, alpha, variant)?,
        VarianceModel::RandomDistribution { assumption } => {
            moments_random(&distributional_params(assumption, k)?, alpha)?
        }
        _ => {
            return Err(Error::InvalidConfig(format!(
                "{model} needs the individual z-scores"
            )))
        }
    };
    Interval::around(n_r, report.variance.max(0.0), level, model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    /// Clamp each resampled fail-safe number (and the centre) at zero.
    pub clamp: bool,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, level: f64) -> Self {
        Self {
            replicates,
            level,
            clamp: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub interval: Interval,
    /// Mean of the resampled fail-safe numbers.
    pub boot_mean: f64,
    /// Standard deviation (divisor `b - 1`) of the resampled fail-safe numbers.
    pub boot_se: f64,
}

/// Nonparametric bootstrap: `b` resamples of the z-scores with replacement,
/// interval centred at the observed fail-safe number with the bootstrap SD.
pub fn ci_bootstrap(
    sample: &ZSample,
    opts: &BootstrapOptions,
    src: &mut RandomSource,
) -> Result<BootstrapInterval> {
    let k = sample.k();
    if k < 2 {
        return Err(Error::InsufficientData { need: 2, got: k });
    }
    if opts.replicates < MIN_BOOTSTRAP_REPLICATES {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPLICATES} replicates, got {}",
            opts.replicates
        )));
    }
    let est = rosenthal_nr(sample)?;
    let z = sample.z();
    let kf = k as f64;
    let za2 = est.z_alpha * est.z_alpha;
    let threshold = est.z_alpha * kf.sqrt();

    let mut draws = Vec::with_capacity(opts.replicates);
    for _ in 0..opts.replicates {
        let s: f64 = (0..k).map(|_| z[src.index(k)]).sum();
        let raw = s * s / za2 - kf;
        draws.push(if opts.clamp && (s < threshold || raw < 0.0) {
            0.0
        } else {
            raw
        });
    }
    let b = draws.len() as f64;
    let boot_mean = draws.iter().sum::<f64>() / b;
    let boot_var = if draws.iter().all(|&d| d == draws[0]) {
        0.0
    } else {
        draws.iter().map(|d| (d - boot_mean).powi(2)).sum::<f64>() / (b - 1.0)
    };
    let center = if opts.clamp { est.n_r } else { est.n_r_raw };
    let interval = Interval::around(
        center,
        boot_var,
        opts.level,
        VarianceModel::Bootstrap {
            replicates: opts.replicates,
        },
    )?;
    Ok(BootstrapInterval {
        interval,
        boot_mean,
        boot_se: boot_var.sqrt(),
    })
}

/// Interval for any model; bootstrap draws come from stream 0 of `seed`.
pub fn compute_interval(
    estimate: &FailSafeEstimate,
    sample: &ZSample,
    model: VarianceModel,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    match model {
        VarianceModel::Bootstrap { replicates } => {
            let mut src = RandomSource::new(seed, 0);
            ci_bootstrap(sample, &BootstrapOptions::new(replicates, level), &mut src)
                .map(|b| b.interval)
        }
        _ => ci_normal(estimate, sample, model, level),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub critical: f64,
    pub reject: bool,
    /// `5k + 10`.
    pub null_value: f64,
    pub variance: f64,
}

/// One-sided test of `N > 5k + 10`: `T = (N - 5k - 10) / sqrt(Var)`, reject iff `T > z_alpha`.
pub fn failsafe_test(
    estimate: &FailSafeEstimate,
    variance: f64,
    alpha: f64,
) -> Result<TestOutcome> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::Degenerate(format!(
            "test needs a positive variance, got {variance}"
        )));
    }
    let critical = crate::dist::z_alpha(alpha)?;
    let null_value = rule_of_thumb(estimate.k);
    let statistic = (estimate.n_r - null_value) / variance.sqrt();
    Ok(TestOutcome {
        statistic,
        critical,
        reject: statistic > critical,
        null_value,
        variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub k: u64,
    pub cutoff: u64,
    /// `5k + 10 + z_alpha sqrt(Var)` before rounding.
    pub exact: f64,
}

pub fn default_cutoff_model() -> VarianceModel {
    VarianceModel::FixedDistribution {
        assumption: Assumption::HalfNormal,
        variant: Variant::Exact,
    }
}

/// Smallest fail-safe number significantly above `5k + 10`, for `k = 1..=k_max`,
/// rounded to the nearest integer.
pub fn cutoff_table(k_max: u64, alpha: f64, model: VarianceModel) -> Result<Vec<Cutoff>> {
    if k_max == 0 {
        return Err(Error::Domain("k_max must be at least 1".into()));
    }
    let za = crate::dist::z_alpha(alpha)?;
    (1..=k_max)
        .map(|k| {
            let var = ci_from_summary(0.0, k, alpha, model, 0.5)?.variance_used;
            let exact = rule_of_thumb(k) + za * var.sqrt();
            Ok(Cutoff {
                k,
                cutoff: exact.round() as u64,
                exact,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::failsafe::invert_nr;

    fn surrogate(n_r: f64, k: u64) -> FailSafeEstimate {
        FailSafeEstimate::from_sum(invert_nr(n_r, k, 0.05).unwrap(), k, 0.05).unwrap()
    }

    fn std_fixed() -> VarianceModel {
        VarianceModel::FixedDistribution {
            assumption: Assumption::StdNormal,
            variant: Variant::LargeK,
        }
    }

    fn std_random() -> VarianceModel {
        VarianceModel::RandomDistribution {
            assumption: Assumption::StdNormal,
        }
    }

    #[test]
    fn descriptors_round_trip() {
        for s in [
            "fixed-dist:half-normal:exact",
            "fixed-dist:std-normal:largek",
            "fixed-dist:skew-normal(-0.5):largek",
            "fixed-dist:skew-normal-fit:exact",
            "fixed-moment:largek",
            "random-dist:skew-normal(0.5)",
            "random-moment",
            "bootstrap:500",
        ] {
            let m: VarianceModel = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!(
            "fixed-dist:half-normal".parse::<VarianceModel>().unwrap(),
            VarianceModel::FixedDistribution {
                assumption: Assumption::HalfNormal,
                variant: Variant::LargeK
            }
        );
        assert!("bootstrap:50".parse::<VarianceModel>().is_err());
        assert!("random-moment:x".parse::<VarianceModel>().is_err());
        assert!("nonsense".parse::<VarianceModel>().is_err());
    }

    #[test]
    fn table3_study1() {
        let e = surrogate(2124.0, 63);
        let f = ci_from_summary(e.n_r, 63, 0.05, std_fixed(), 0.95).unwrap();
        assert!((f.lower - 2059.457).abs() < 1e-3 && (f.upper - 2188.543).abs() < 1e-3);
        let r = ci_from_summary(e.n_r, 63, 0.05, std_random(), 0.95).unwrap();
        assert!((r.lower - 2058.212).abs() < 1e-3 && (r.upper - 2189.788).abs() < 1e-3);
    }

    #[test]
    fn table3_study2() {
        let f = ci_from_summary(73860.0, 148, 0.05, std_fixed(), 0.95).unwrap();
        assert!((f.lower - 73708.375).abs() < 1e-3 && (f.upper - 74011.625).abs() < 1e-3);
        let r = ci_from_summary(73860.0, 148, 0.05, std_random(), 0.95).unwrap();
        assert!((r.lower - 73707.123).abs() < 1e-3 && (r.upper - 74012.877).abs() < 1e-3);
    }

    #[test]
    fn normal_interval_from_sample_matches_summary() {
        let z = invert_nr(2124.0, 63, 0.05).unwrap() / 63.0;
        let s = ZSample::with_default_alpha(vec![z; 63]).unwrap();
        let e = rosenthal_nr(&s).unwrap();
        let a = ci_normal(&e, &s, std_fixed(), 0.95).unwrap();
        let b = ci_from_summary(e.n_r, 63, 0.05, std_fixed(), 0.95).unwrap();
        assert!((a.lower - b.lower).abs() < 1e-9 && (a.upper - b.upper).abs() < 1e-9);
        assert!(((a.lower + a.upper) / 2.0 - e.n_r).abs() < 1e-9);
    }

    #[test]
    fn moment_models_need_spread() {
        let s = ZSample::with_default_alpha(vec![2.0; 10]).unwrap();
        let e = rosenthal_nr(&s).unwrap();
        for m in [
            VarianceModel::FixedMoment {
                variant: Variant::LargeK,
            },
            VarianceModel::RandomMoment,
        ] {
            assert!(matches!(
                ci_normal(&e, &s, m, 0.95),
                Err(Error::Degenerate(_))
            ));
        }
        assert!(ci_from_summary(1.0, 10, 0.05, VarianceModel::RandomMoment, 0.95).is_err());
    }

    #[test]
    fn bootstrap_constant_sample_has_zero_width() {
        let s = ZSample::with_default_alpha(vec![2.0; 10]).unwrap();
        let mut src = RandomSource::new(7, 0);
        let b = ci_bootstrap(&s, &BootstrapOptions::new(500, 0.95), &mut src).unwrap();
        assert_eq!(b.boot_se, 0.0);
        assert_eq!(b.interval.width(), 0.0);
        let e = rosenthal_nr(&s).unwrap();
        assert!((b.boot_mean - e.n_r).abs() < 1e-9);
    }

    #[test]
    fn bootstrap_preconditions() {
        let mut src = RandomSource::new(7, 0);
        let one = ZSample::with_default_alpha(vec![2.0]).unwrap();
        assert!(ci_bootstrap(&one, &BootstrapOptions::new(500, 0.95), &mut src).is_err());
        let s = ZSample::with_default_alpha(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(ci_bootstrap(&s, &BootstrapOptions::new(99, 0.95), &mut src).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let s =
            ZSample::with_default_alpha((0..30).map(|i| (i as f64 * 0.37).sin() + 1.0).collect())
                .unwrap();
        let opts = BootstrapOptions::new(400, 0.95);
        let a = ci_bootstrap(&s, &opts, &mut RandomSource::new(11, 3)).unwrap();
        let b = ci_bootstrap(&s, &opts, &mut RandomSource::new(11, 3)).unwrap();
        assert_eq!(a, b);
        let c = ci_bootstrap(&s, &opts, &mut RandomSource::new(11, 4)).unwrap();
        assert_ne!(a.boot_se, c.boot_se);
    }

    #[test]
    fn test_anchors() {
        let var = ci_from_summary(0.0, 25, 0.05, default_cutoff_model(), 0.5)
            .unwrap()
            .variance_used;
        let t = failsafe_test(&surrogate(209.0, 25), var, 0.05).unwrap();
        assert!((t.statistic - 1.65196).abs() < 1e-4 && t.reject);
        let t = failsafe_test(&surrogate(208.0, 25), var, 0.05).unwrap();
        assert!((t.statistic - 1.62963).abs() < 1e-4 && !t.reject);
        let t = failsafe_test(&surrogate(135.0, 25), var, 0.05).unwrap();
        assert!(t.statistic.abs() < 1e-9 && !t.reject);
        assert!(failsafe_test(&surrogate(135.0, 25), 0.0, 0.05).is_err());
    }

    #[test]
    fn cutoff_anchors() {
        let t = cutoff_table(160, 0.05, default_cutoff_model()).unwrap();
        for (k, c) in [
            (1, 17),
            (2, 26),
            (3, 35),
            (25, 209),
            (63, 618),
            (100, 1096),
            (160, 1995),
        ] {
            assert_eq!(t[k - 1].cutoff, c, "k={k}");
        }
        assert!(t.windows(2).all(|w| w[1].cutoff > w[0].cutoff));
        assert!(t.iter().all(|c| c.cutoff as f64 > rule_of_thumb(c.k)));
    }
}
