//! Rosenthal's fail-safe number, its moments under fixed and Poisson study
//! counts, its density, and the Iyengar–Greenhouse variant.
//!
//! With `S = sum z_i`, the estimator is `N = S^2 / z_alpha^2 - k`. Treating
//! `S ~ N(k mu, k sigma^2)` truncated to `S >= z_alpha sqrt(k)` (so that
//! `N >= 0`) gives the density and the "exact" moments below; dropping the
//! truncation gives the large-k forms.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dist::{inverse_mills_ratio, poisson_pmf, std_normal_cdf, std_normal_pdf, z_alpha};
use crate::error::{Error, Result};
use crate::estimators::{ParameterTriple, ZSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailSafeEstimate {
    /// Fail-safe number, clamped at zero.
    pub n_r: f64,
    /// `S^2 / z_alpha^2 - k` before clamping.
    pub n_r_raw: f64,
    pub k: u64,
    pub sum_z: f64,
    pub stouffer_z: f64,
    pub alpha: f64,
    pub z_alpha: f64,
    /// Set when `sum_z < z_alpha sqrt(k)`: the combined test is not significant.
    pub below_threshold: bool,
}

impl FailSafeEstimate {
    pub fn from_sum(sum_z: f64, k: u64, alpha: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InsufficientData { need: 1, got: 0 });
        }
        let za = z_alpha(alpha)?;
        let kf = k as f64;
        let raw = sum_z * sum_z / (za * za) - kf;
        let below = sum_z < za * kf.sqrt();
        Ok(Self {
            n_r: if below { 0.0 } else { raw.max(0.0) },
            n_r_raw: raw,
            k,
            sum_z,
            stouffer_z: sum_z / kf.sqrt(),
            alpha,
            z_alpha: za,
            below_threshold: below,
        })
    }

    /// Rosenthal's tolerance level `5k + 10`.
    pub fn rule_of_thumb_threshold(&self) -> f64 {
        rule_of_thumb(self.k)
    }

    pub fn exceeds_rule_of_thumb(&self) -> bool {
        self.n_r > self.rule_of_thumb_threshold()
    }
}

pub fn rule_of_thumb(k: u64) -> f64 {
    5.0 * k as f64 + 10.0
}

pub fn rosenthal_nr(sample: &ZSample) -> Result<FailSafeEstimate> {
    FailSafeEstimate::from_sum(sample.sum(), sample.k() as u64, sample.alpha())
}

/// Sum of z-scores that yields a given fail-safe number.
pub fn invert_nr(n_r: f64, k: u64, alpha: f64) -> Result<f64> {
    if n_r.is_nan() || n_r < 0.0 {
        return Err(Error::Domain(format!(
            "fail-safe number must be >= 0, got {n_r}"
        )));
    }
    Ok(z_alpha(alpha)? * (n_r + k as f64).sqrt())
}

/// Mean of a standard normal truncated above at `z_alpha`: `-phi(z)/Phi(z)`.
pub fn truncated_null_mean(alpha: f64) -> Result<f64> {
    let za = z_alpha(alpha)?;
    Ok(-std_normal_pdf(za) / std_normal_cdf(za))
}

const IG_TOL: f64 = 1e-8;

/// Number of unpublished studies when their z-scores average `M(alpha) < 0`
/// instead of zero: the root of `z_alpha sqrt(n + k) = S + n M(alpha)`.
pub fn iyengar_greenhouse_n(sample: &ZSample) -> Result<f64> {
    let est = rosenthal_nr(sample)?;
    let za = est.z_alpha;
    let kf = est.k as f64;
    if est.below_threshold {
        return Err(Error::BelowThreshold {
            sum_z: est.sum_z,
            threshold: za * kf.sqrt(),
        });
    }
    let m = truncated_null_mean(sample.alpha())?;
    let g = |n: f64| za * (n + kf).sqrt() - est.sum_z - n * m;
    let (mut lo, mut hi) = (0.0, est.n_r + 1.0);
    let (g_lo, g_hi) = (g(lo), g(hi));
    if g_lo >= 0.0 {
        return Ok(0.0);
    }
    if g_hi < 0.0 {
        return Err(Error::NoBracket { lo, hi });
    }
    while hi - lo > IG_TOL {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentFormula {
    FixedExact,
    FixedLargeK,
    RandomK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub expectation: f64,
    pub variance: f64,
    /// `(sqrt(k) mu - z_alpha) / sigma`.
    pub lambda_star: f64,
    /// Truncation correction to the expectation.
    pub epsilon: f64,
    /// Truncation correction to the variance.
    pub delta_star: f64,
    pub formula: MomentFormula,
}

fn require_spread(params: &ParameterTriple) -> Result<()> {
    if params.sigma2 > 0.0 && params.sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::Degenerate(format!(
            "sigma2 must be positive, got {}",
            params.sigma2
        )))
    }
}

fn require_k(k: u64) -> Result<f64> {
    if k == 0 {
        Err(Error::InsufficientData { need: 1, got: 0 })
    } else {
        Ok(k as f64)
    }
}

fn lambda_star(mu: f64, sigma: f64, k: f64, za: f64) -> f64 {
    (k.sqrt() * mu - za) / sigma
}

fn largek(mu: f64, sigma2: f64, k: f64, za: f64) -> (f64, f64) {
    let za2 = za * za;
    (
        (k * k * mu * mu + k * sigma2) / za2 - k,
        2.0 * k * k * sigma2 * (2.0 * k * mu * mu + sigma2) / (za2 * za2),
    )
}

/// Large-k moments (no truncation): `E = (k^2 mu^2 + k sigma^2)/z^2 - k`,
/// `Var = 2 k^2 sigma^2 (2 k mu^2 + sigma^2) / z^4`.
pub fn moments_fixed_largek(params: &ParameterTriple, k: u64, alpha: f64) -> Result<MomentReport> {
    require_spread(params)?;
    let kf = require_k(k)?;
    let za = z_alpha(alpha)?;
    let (expectation, variance) = largek(params.mu, params.sigma2, kf, za);
    Ok(MomentReport {
        expectation,
        variance,
        lambda_star: lambda_star(params.mu, params.sigma(), kf, za),
        epsilon: 0.0,
        delta_star: 0.0,
        formula: MomentFormula::FixedLargeK,
    })
}

/// Moments with the truncation corrections `epsilon` and `delta_star`.
///
/// With `h = phi(l)/Phi(l)`, `l` the truncation point `lambda_star`:
///
/// ```text
/// epsilon    = h k sigma (sqrt(k) mu + z) / z^2
/// delta_star = h [ k^(5/2) sigma^3 (5 sqrt(k) mu + z)^2 / z^4
///                  - (h + l) k^(3/2) sigma^2 (sqrt(k) mu + z)^2 / z^4 ]
/// ```
///
/// The `k^(5/2)` factor on the first term is the scaling under which the
/// half-normal cutoff table is reproduced for every `k`; the two coincide at
/// `k = 1`.
pub fn moments_fixed_exact(params: &ParameterTriple, k: u64, alpha: f64) -> Result<MomentReport> {
    require_spread(params)?;
    let kf = require_k(k)?;
    let za = z_alpha(alpha)?;
    let (mu, sigma2) = (params.mu, params.sigma2);
    let sigma = sigma2.sqrt();
    let l = lambda_star(mu, sigma, kf, za);
    let h = inverse_mills_ratio(l);
    let za2 = za * za;
    let za4 = za2 * za2;
    let sk = kf.sqrt();

    let epsilon = h * kf * sigma * (sk * mu + za) / za2;
    let delta_star = h
        * (kf.powf(2.5) * sigma2 * sigma * (5.0 * sk * mu + za).powi(2) / za4
            - (h + l) * kf.powf(1.5) * sigma2 * (sk * mu + za).powi(2) / za4);
    let (e0, v0) = largek(mu, sigma2, kf, za);
    Ok(MomentReport {
        expectation: e0 + epsilon,
        // under extreme truncation (lambda_star below about -7) the correction
        // can overshoot slightly below zero
        variance: (v0 + delta_star).max(0.0),
        lambda_star: l,
        epsilon,
        delta_star,
        formula: MomentFormula::FixedExact,
    })
}

/// Moments when the study count is `Poisson(lambda)` (compound-Poisson `S`).
pub fn moments_random(params: &ParameterTriple, alpha: f64) -> Result<MomentReport> {
    require_spread(params)?;
    let l = params.lambda;
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Domain(format!("lambda must be positive, got {l}")));
    }
    let za = z_alpha(alpha)?;
    let (mu2, s2) = (params.mu * params.mu, params.sigma2);
    let za2 = za * za;
    let (l2, l3) = (l * l, l * l * l);
    let expectation = (l2 * mu2 + l * (mu2 + s2)) / za2 - l;
    let variance = ((4.0 * l3 + 6.0 * l2 + l) * mu2 * mu2
        + (4.0 * l3 + 16.0 * l2 + 6.0 * l) * mu2 * s2
        + (2.0 * l2 + 3.0 * l) * s2 * s2)
        / (za2 * za2)
        - 2.0 * ((2.0 * l2 + l) * mu2 + l * s2) / za2
        + l;
    Ok(MomentReport {
        expectation,
        variance,
        lambda_star: lambda_star(params.mu, params.sigma(), l, za),
        epsilon: 0.0,
        delta_star: 0.0,
        formula: MomentFormula::RandomK,
    })
}

/// Compound-Poisson moments from the deviates' first four raw moments
/// `[E z, E z^2, E z^3, E z^4]`.
///
/// `moments_random` is the special case with normal third and fourth moments;
/// for skewed deviates the two variances differ.
pub fn moments_random_raw(lambda: f64, raw: [f64; 4], alpha: f64) -> Result<MomentReport> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let za = z_alpha(alpha)?;
    let [m1, m2, m3, m4] = raw;
    let (l, za2) = (lambda, za * za);
    let expectation = (l * m2 + l * l * m1 * m1) / za2 - l;
    let variance =
        (4.0 * l * l * l * m1 * m1 * m2 + 4.0 * l * l * m1 * m3 + 2.0 * l * l * m2 * m2 + l * m4)
            / (za2 * za2)
            - (4.0 * l * l * m1 * m1 + 2.0 * l * m2) / za2
            + l;
    let sigma2 = m2 - m1 * m1;
    Ok(MomentReport {
        expectation,
        variance,
        lambda_star: if sigma2 > 0.0 {
            lambda_star(m1, sigma2.sqrt(), l, za)
        } else {
            f64::NAN
        },
        epsilon: 0.0,
        delta_star: 0.0,
        formula: MomentFormula::RandomK,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyCount {
    Fixed(u64),
    Random,
}

/// Expected fail-safe number used as the coverage target in simulations.
pub fn true_nr(params: &ParameterTriple, count: StudyCount, alpha: f64) -> Result<f64> {
    match count {
        StudyCount::Fixed(k) => moments_fixed_largek(params, k, alpha).map(|m| m.expectation),
        StudyCount::Random => moments_random(params, alpha).map(|m| m.expectation),
    }
}

/// Whether the truncation at `N >= 0` is kept (`Exact`) or dropped (`LargeK`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Exact,
    LargeK,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Exact => "exact",
            Variant::LargeK => "largek",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "exact" => Ok(Variant::Exact),
            "largek" | "large-k" => Ok(Variant::LargeK),
            other => Err(Error::InvalidConfig(format!("unknown variant `{other}`"))),
        }
    }
}

pub fn moments_fixed(
    params: &ParameterTriple,
    k: u64,
    alpha: f64,
    variant: Variant,
) -> Result<MomentReport> {
    match variant {
        Variant::Exact => moments_fixed_exact(params, k, alpha),
        Variant::LargeK => moments_fixed_largek(params, k, alpha),
    }
}

/// Density of the fail-safe number at `n_r`.
///
/// `Exact` renormalises by `1/Phi(lambda_star)` for the truncation `N >= 0`;
/// `LargeK` omits that factor.
pub fn nr_pdf(
    n_r: f64,
    params: &ParameterTriple,
    k: u64,
    alpha: f64,
    variant: Variant,
) -> Result<f64> {
    require_spread(params)?;
    let kf = require_k(k)?;
    let za = z_alpha(alpha)?;
    if n_r < 0.0 {
        return Ok(0.0);
    }
    let ks2 = kf * params.sigma2;
    let root = (n_r + kf).sqrt();
    let dev = za * root - kf * params.mu;
    let base = za / (2.0 * (2.0 * std::f64::consts::PI * ks2).sqrt() * root)
        * (-dev * dev / (2.0 * ks2)).exp();
    Ok(match variant {
        Variant::LargeK => base,
        Variant::Exact => base / std_normal_cdf(lambda_star(params.mu, params.sigma(), kf, za)),
    })
}

/// Upper integration limit for the fail-safe density: the image of
/// `max(k mu, z sqrt(k)) + 12 sqrt(k) sigma` under `s -> s^2/z^2 - k`.
pub fn nr_support_upper(params: &ParameterTriple, k: u64, alpha: f64) -> Result<f64> {
    let kf = require_k(k)?;
    let za = z_alpha(alpha)?;
    let s_hi = (kf * params.mu).max(za * kf.sqrt()) + 12.0 * (kf * params.sigma2).sqrt();
    Ok(s_hi * s_hi / (za * za) - kf)
}

/// Joint density of `(N, k)` with `k ~ Poisson(params.lambda)`, for `k >= 1`.
pub fn nr_joint_pdf(n_r: f64, k: u64, params: &ParameterTriple, alpha: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain(
            "joint density is undefined at k = 0 (no conditional density)".into(),
        ));
    }
    Ok(nr_pdf(n_r, params, k, alpha, Variant::Exact)? * poisson_pmf(k, params.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{distributional_params, Assumption, Provenance};

    const ZA: f64 = 1.644_853_626_951_472_6;

    fn hn(k: u64) -> ParameterTriple {
        distributional_params(Assumption::HalfNormal, k).unwrap()
    }

    fn triple(mu: f64, sigma2: f64, lambda: f64) -> ParameterTriple {
        ParameterTriple {
            mu,
            sigma2,
            lambda,
            provenance: Provenance::MoM,
        }
    }

    #[test]
    fn nr_boundaries() {
        let s = ZSample::with_default_alpha(vec![ZA; 10]).unwrap();
        let e = rosenthal_nr(&s).unwrap();
        assert!((e.n_r - 90.0).abs() < 1e-9);
        assert!(!e.below_threshold);
        let s = ZSample::with_default_alpha(vec![ZA]).unwrap();
        let e = rosenthal_nr(&s).unwrap();
        assert!(e.n_r.abs() < 1e-9);
        assert!(!e.exceeds_rule_of_thumb());
    }

    #[test]
    fn study_one_surrogate() {
        // z chosen so that sum z = z_alpha sqrt(2124 + 63)
        let s = ZSample::with_default_alpha(vec![1.220_987; 63]).unwrap();
        let e = rosenthal_nr(&s).unwrap();
        assert!((e.n_r - 2124.0).abs() < 0.5, "{}", e.n_r);
        assert!(e.exceeds_rule_of_thumb());
    }

    #[test]
    fn below_threshold_is_clamped_and_flagged() {
        let s = ZSample::with_default_alpha(vec![0.1, -0.2, 0.3]).unwrap();
        let e = rosenthal_nr(&s).unwrap();
        assert!(e.below_threshold);
        assert_eq!(e.n_r, 0.0);
        assert!(e.n_r_raw < 0.0);
        assert!(matches!(
            iyengar_greenhouse_n(&s),
            Err(Error::BelowThreshold { .. })
        ));
    }

    #[test]
    fn empty_sample_is_an_error() {
        let s = ZSample::with_default_alpha(vec![]).unwrap();
        assert!(matches!(
            rosenthal_nr(&s),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn inversion_anchors() {
        assert!((invert_nr(0.0, 1, 0.05).unwrap() - 1.644854).abs() < 1e-6);
        assert!((invert_nr(2124.0, 63, 0.05).unwrap() - 76.9222).abs() < 1e-4);
        assert!((invert_nr(90.0, 10, 0.05).unwrap() - 16.44854).abs() < 1e-5);
        assert!(invert_nr(-1.0, 10, 0.05).is_err());
    }

    #[test]
    fn iyengar_greenhouse_anchors() {
        assert!((truncated_null_mean(0.05).unwrap() + 0.108_564).abs() < 1e-6);
        let mut z = vec![2.0; 10];
        let s = ZSample::with_default_alpha(z.clone()).unwrap();
        let n = iyengar_greenhouse_n(&s).unwrap();
        // root of z sqrt(n + 10) = 20 - 0.1085638 n by an independent solver
        assert!((n - 58.670_440_6).abs() < 1e-6, "{n}");
        assert!(n <= rosenthal_nr(&s).unwrap().n_r);
        z = vec![ZA * (1.0 + 1e-9) / 10f64.sqrt(); 10];
        let s = ZSample::with_default_alpha(z).unwrap();
        assert!(iyengar_greenhouse_n(&s).unwrap() < 1e-6);
    }

    #[test]
    fn largek_anchors() {
        let sn = distributional_params(Assumption::StdNormal, 63).unwrap();
        let m = moments_fixed_largek(&sn, 63, 0.05).unwrap();
        assert!((m.variance - 1_084.431_358).abs() < 1e-5);
        let m = moments_fixed_largek(&hn(5), 5, 0.05).unwrap();
        assert!((m.expectation - 1.554_097_448).abs() < 1e-8);
        let m = moments_fixed_largek(&triple(0.0, 1.0, 1.0), 1, 0.05).unwrap();
        assert!((m.expectation - (1.0 / (ZA * ZA) - 1.0)).abs() < 1e-12);
        assert!((m.expectation + 0.6304).abs() < 1e-4);
    }

    #[test]
    fn exact_anchors() {
        let m = moments_fixed_exact(&hn(1), 1, 0.05).unwrap();
        assert!((m.lambda_star + 1.405_034).abs() < 1e-6);
        assert!((m.variance - 1.678_314).abs() < 1e-5);
        let m = moments_fixed_exact(&hn(50), 50, 0.05).unwrap();
        assert!(m.delta_star < 1e-4);
        assert!((m.variance - 15_891.843_63).abs() < 1e-3);
        assert!((m.lambda_star - 6.630_680).abs() < 1e-6);
    }

    #[test]
    fn exact_requires_spread() {
        assert!(matches!(
            moments_fixed_exact(&triple(0.5, 0.0, 3.0), 3, 0.05),
            Err(Error::Degenerate(_))
        ));
        assert!(moments_fixed_largek(&triple(0.5, 0.0, 3.0), 3, 0.05).is_err());
        assert!(moments_random(&triple(0.5, 0.0, 3.0), 0.05).is_err());
    }

    #[test]
    fn exact_converges_to_largek() {
        let p = hn(1);
        let mut last = f64::INFINITY;
        for k in [5, 25, 100] {
            let e = moments_fixed_exact(&p, k, 0.05).unwrap();
            let l = moments_fixed_largek(&p, k, 0.05).unwrap();
            let diff = (e.variance - l.variance).abs() + (e.expectation - l.expectation).abs();
            assert!(diff < last, "k={k}");
            last = diff;
        }
        // lambda* >= 6: the two agree to 1e-6 relative
        let e = moments_fixed_exact(&p, 60, 0.05).unwrap();
        let l = moments_fixed_largek(&p, 60, 0.05).unwrap();
        assert!(e.lambda_star >= 6.0);
        assert!((e.variance - l.variance).abs() / l.variance < 1e-6);
        assert!((e.expectation - l.expectation).abs() / l.expectation < 1e-6);
    }

    #[test]
    fn random_anchors() {
        let p = triple(0.0, 1.0, 148.0);
        let m = moments_random(&p, 0.05).unwrap();
        assert!((m.variance - 6_083.978_774).abs() < 1e-5);
        let m = moments_random(&hn(5), 0.05).unwrap();
        assert!((m.expectation - 2.730_607_423).abs() < 1e-8);
    }

    #[test]
    fn raw_moment_form_reduces_to_normal_case() {
        use crate::dist::normal_raw_moment;
        for (mu, s2, l) in [(0.0, 1.0, 148.0), (0.8, 0.36, 10.0), (-0.3, 2.0, 3.5)] {
            let raw = [1, 2, 3, 4].map(|o| normal_raw_moment(o, mu, s2).unwrap());
            let a = moments_random_raw(l, raw, 0.05).unwrap();
            let b = moments_random(&triple(mu, s2, l), 0.05).unwrap();
            assert!((a.expectation - b.expectation).abs() < 1e-9 * b.expectation.abs().max(1.0));
            assert!((a.variance - b.variance).abs() < 1e-9 * b.variance);
        }
        // half-normal raw moments: sqrt(2/pi), 1, 2 sqrt(2/pi), 3
        let r = crate::dist::SQRT_2_OVER_PI;
        let m = moments_random_raw(15.0, [r, 1.0, 2.0 * r, 3.0], 0.05).unwrap();
        assert!((m.variance - 1_190.409_111).abs() < 1e-5);
    }

    #[test]
    fn true_value_matches_moment_expectations() {
        let p = hn(5);
        assert!((true_nr(&p, StudyCount::Fixed(5), 0.05).unwrap() - 1.554_097).abs() < 1e-6);
        assert!((true_nr(&p, StudyCount::Random, 0.05).unwrap() - 2.730_607).abs() < 1e-6);
        let sn = triple(0.0, 1.0, 1.0);
        for k in [1, 7, 40] {
            let kf = k as f64;
            let t = true_nr(&sn, StudyCount::Fixed(k), 0.05).unwrap();
            assert!((t - (kf / (ZA * ZA) - kf)).abs() < 1e-10);
        }
    }

    #[test]
    fn pdf_variants_differ_by_truncation_factor() {
        let p = hn(5);
        let m = moments_fixed_exact(&p, 5, 0.05).unwrap();
        let factor = 1.0 / std_normal_cdf(m.lambda_star);
        for i in 0..50 {
            let n = i as f64 * 1.7;
            let e = nr_pdf(n, &p, 5, 0.05, Variant::Exact).unwrap();
            let l = nr_pdf(n, &p, 5, 0.05, Variant::LargeK).unwrap();
            assert!((e - l * factor).abs() <= 1e-15 * e.max(1.0));
        }
        assert_eq!(nr_pdf(-1.0, &p, 5, 0.05, Variant::Exact).unwrap(), 0.0);
    }

    #[test]
    fn joint_pdf_factorises() {
        let p = hn(5);
        let joint = nr_joint_pdf(2.0, 5, &p, 0.05).unwrap();
        let cond = nr_pdf(2.0, &p, 5, 0.05, Variant::Exact).unwrap();
        assert!((joint - cond * poisson_pmf(5, 5.0)).abs() < 1e-14);
        assert!(matches!(
            nr_joint_pdf(2.0, 0, &p, 0.05),
            Err(Error::Domain(_))
        ));
    }
}
