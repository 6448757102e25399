//! Parameter triples `(mu, sigma2, lambda)` for the published z-scores, either
//! estimated by the method of moments or fixed by a distributional assumption.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::SQRT_2_OVER_PI;
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Per-study standard normal deviates and the one-sided significance level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZSample {
    z: Vec<f64>,
    alpha: f64,
}

impl ZSample {
    pub fn new(z: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 0.5) {
            return Err(Error::Domain(format!(
                "alpha must lie in (0, 0.5], got {alpha}"
            )));
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("z[{i}] = {} is not finite", z[i])));
        }
        Ok(Self { z, alpha })
    }

    pub fn with_default_alpha(z: Vec<f64>) -> Result<Self> {
        Self::new(z, DEFAULT_ALPHA)
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }

    pub fn sum(&self) -> f64 {
        self.z.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KModel {
    Fixed,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "delta", rename_all = "kebab-case")]
pub enum Provenance {
    MoM,
    StdNormal,
    HalfNormal,
    SkewNormalFit,
    SkewNormalFixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterTriple {
    pub mu: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub provenance: Provenance,
}

impl ParameterTriple {
    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Same `(mu, sigma2)` with a different Poisson rate / study count.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

/// Distributional assumption on the z-scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "delta", rename_all = "kebab-case")]
pub enum Assumption {
    StdNormal,
    HalfNormal,
    /// `SN(0, 1, delta)`.
    SkewNormalFixed(f64),
    /// Skew normal with `(xi, omega, delta)` fitted to the data by moments.
    SkewNormalFit,
}

impl Assumption {
    /// `(mu, sigma2)` implied by the assumption, if it does not depend on data.
    pub fn moments(&self) -> Option<(f64, f64)> {
        match *self {
            Assumption::StdNormal => Some((0.0, 1.0)),
            Assumption::HalfNormal => Some((SQRT_2_OVER_PI, 1.0 - 2.0 / std::f64::consts::PI)),
            Assumption::SkewNormalFixed(d) => {
                Some((d * SQRT_2_OVER_PI, 1.0 - 2.0 * d * d / std::f64::consts::PI))
            }
            Assumption::SkewNormalFit => None,
        }
    }

    /// Resolve to a parameter triple with `lambda = sample.k()`.
    pub fn resolve(&self, sample: &ZSample) -> Result<ParameterTriple> {
        match self {
            Assumption::SkewNormalFit => skew_normal_mom_fit(sample).map(|f| f.triple),
            _ => distributional_params(*self, sample.k() as u64),
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assumption::StdNormal => f.write_str("std-normal"),
            Assumption::HalfNormal => f.write_str("half-normal"),
            Assumption::SkewNormalFixed(d) => write!(f, "skew-normal({d})"),
            Assumption::SkewNormalFit => f.write_str("skew-normal-fit"),
        }
    }
}

impl FromStr for Assumption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "std-normal" | "standard-normal" | "normal" => return Ok(Assumption::StdNormal),
            "half-normal" => return Ok(Assumption::HalfNormal),
            "skew-normal-fit" => return Ok(Assumption::SkewNormalFit),
            "skew-pos" | "skew-normal+" => return Ok(Assumption::SkewNormalFixed(0.5)),
            "skew-neg" | "skew-normal-" => return Ok(Assumption::SkewNormalFixed(-0.5)),
            _ => {}
        }
        if let Some(inner) = s
            .strip_prefix("skew-normal(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let d: f64 = inner
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad skew-normal delta `{inner}`")))?;
            if d.abs() >= 1.0 {
                return Err(Error::Domain(format!(
                    "skew-normal delta must lie in (-1,1), got {d}"
                )));
            }
            return Ok(Assumption::SkewNormalFixed(d));
        }
        Err(Error::InvalidConfig(format!(
            "unknown distributional assumption `{s}`"
        )))
    }
}

fn mean_and_population_variance(z: &[f64]) -> (f64, f64) {
    if z.iter().all(|&v| v == z[0]) {
        return (z[0], 0.0);
    }
    let k = z.len() as f64;
    let mean = z.iter().sum::<f64>() / k;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    (mean, var)
}

/// Method-of-moments triple: sample mean, divisor-`k` variance, `lambda = k`.
///
/// The variance is accumulated around the mean, which is algebraically equal
/// to `mean(z^2) - mean(z)^2` but does not cancel catastrophically.
pub fn moments_estimate(sample: &ZSample, _k_model: KModel) -> Result<ParameterTriple> {
    let k = sample.k();
    if k < 2 {
        return Err(Error::InsufficientData { need: 2, got: k });
    }
    let (mu, sigma2) = mean_and_population_variance(sample.z());
    Ok(ParameterTriple {
        mu,
        sigma2,
        lambda: k as f64,
        provenance: Provenance::MoM,
    })
}

/// Parameter table for a data-independent assumption.
pub fn distributional_params(assumption: Assumption, k: u64) -> Result<ParameterTriple> {
    if k == 0 {
        return Err(Error::InsufficientData { need: 1, got: 0 });
    }
    let (mu, sigma2) = assumption.moments().ok_or_else(|| {
        Error::InvalidConfig("skew-normal-fit needs data; use skew_normal_mom_fit".into())
    })?;
    let provenance = match assumption {
        Assumption::StdNormal => Provenance::StdNormal,
        Assumption::HalfNormal => Provenance::HalfNormal,
        Assumption::SkewNormalFixed(d) => {
            if d.abs() >= 1.0 {
                return Err(Error::Domain(format!(
                    "skew-normal delta must lie in (-1,1), got {d}"
                )));
            }
            Provenance::SkewNormalFixed(d)
        }
        Assumption::SkewNormalFit => unreachable!(),
    };
    Ok(ParameterTriple {
        mu,
        sigma2,
        lambda: k as f64,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewNormalFit {
    pub xi: f64,
    pub omega2: f64,
    pub delta: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub triple: ParameterTriple,
}

/// Moment fit of `SN(xi, omega, delta)`:
///
/// ```text
/// r      = cbrt(m3 / b1)
/// xi     = m1 - a1 r
/// omega2 = m2 - a1^2 r^2
/// delta  = sign(m3) / sqrt(a1^2 + m2 / r^2)
/// ```
///
/// with `a1 = sqrt(2/pi)`, `b1 = (4/pi - 1) a1` and central moments taken with
/// divisor `k`.
pub fn skew_normal_mom_fit(sample: &ZSample) -> Result<SkewNormalFit> {
    let k = sample.k();
    if k < 3 {
        return Err(Error::InsufficientData { need: 3, got: k });
    }
    let z = sample.z();
    let kf = k as f64;
    let (m1, m2) = mean_and_population_variance(z);
    let m3 = z.iter().map(|v| (v - m1).powi(3)).sum::<f64>() / kf;

    let a1 = SQRT_2_OVER_PI;
    let b1 = (4.0 / std::f64::consts::PI - 1.0) * a1;
    let r = (m3 / b1).cbrt();
    let xi = m1 - a1 * r;
    let omega2 = m2 - a1 * a1 * r * r;
    let delta = if r == 0.0 {
        0.0
    } else {
        m3.signum() / (a1 * a1 + m2 / (r * r)).sqrt()
    };
    if omega2.is_nan() || omega2 <= 0.0 || delta.is_nan() || delta.abs() >= 1.0 {
        return Err(Error::FitInfeasible {
            m1,
            m2,
            m3,
            omega2,
            delta,
        });
    }
    let omega = omega2.sqrt();
    let triple = ParameterTriple {
        mu: xi + omega * delta * a1,
        sigma2: omega2 * (1.0 - 2.0 * delta * delta / std::f64::consts::PI),
        lambda: kf,
        provenance: Provenance::SkewNormalFit,
    };
    Ok(SkewNormalFit {
        xi,
        omega2,
        delta,
        m1,
        m2,
        m3,
        triple,
    })
}
