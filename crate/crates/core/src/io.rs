//! CSV ingestion of z-scores or effect/SE pairs, and report assembly for the
//! command-line front end.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ZSample, DEFAULT_ALPHA};
use crate::failsafe::{iyengar_greenhouse_n, rosenthal_nr, FailSafeEstimate};
use crate::inference::{
    compute_interval, default_cutoff_model, failsafe_test, model_variance, Cutoff, Interval,
    TestOutcome, VarianceModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schema {
    /// A `z` column.
    Z,
    /// `effect` and `se` columns; `z = effect / se`.
    EffectSe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    /// Detected from the header when `None`.
    pub schema: Option<Schema>,
    pub alpha: f64,
    /// Negate every z (for effects oriented the other way).
    pub flip_sign: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            schema: None,
            alpha: DEFAULT_ALPHA,
            flip_sign: false,
        }
    }
}

fn detect(headers: &csv::StringRecord) -> Result<(Schema, usize, Option<usize>)> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    match (find("z"), find("effect"), find("se")) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => Err(Error::Schema(
            "file has both a `z` column and `effect`/`se` columns; use one form".into(),
        )),
        (Some(z), None, None) => Ok((Schema::Z, z, None)),
        (None, Some(e), Some(s)) => Ok((Schema::EffectSe, e, Some(s))),
        (None, Some(_), None) => Err(Error::Schema("`effect` column without `se`".into())),
        (None, None, Some(_)) => Err(Error::Schema("`se` column without `effect`".into())),
        (None, None, None) => Err(Error::Schema(
            "header must name a `z` column or `effect` and `se` columns".into(),
        )),
    }
}

fn field(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64> {
    let raw = rec.get(idx).map(str::trim).unwrap_or("");
    let v: f64 = raw.parse().map_err(|_| Error::Ingest {
        line,
        message: format!("`{name}` value `{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Ingest {
            line,
            message: format!("`{name}` must be finite, got {raw}"),
        });
    }
    Ok(v)
}

pub fn ingest_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<ZSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Schema("empty file".into()));
    }
    let (found, zi, si) = detect(&headers)?;
    if let Some(want) = opts.schema {
        if want != found {
            return Err(Error::Schema(format!(
                "expected {want:?} columns but the header has {found:?} columns"
            )));
        }
    }
    let mut z = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let v = match si {
            None => field(&rec, zi, "z", line)?,
            Some(si) => {
                let effect = field(&rec, zi, "effect", line)?;
                let se = field(&rec, si, "se", line)?;
                if se <= 0.0 {
                    return Err(Error::Ingest {
                        line,
                        message: format!("`se` must be positive, got {se}"),
                    });
                }
                effect / se
            }
        };
        z.push(if opts.flip_sign { -v } else { v });
    }
    if z.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    ZSample::new(z, opts.alpha)
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<ZSample> {
    let f = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(f, opts)
}

/// Single `z` column; values are written in shortest round-trip form.
pub fn write_z_csv<W: Write>(sample: &ZSample, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["z"])?;
    for v in sample.z() {
        w.write_record([format!("{v:?}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cutoffs_csv<W: Write>(rows: &[Cutoff], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "cutoff"])?;
    for r in rows {
        w.write_record([r.k.to_string(), r.cutoff.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
    Text,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            "text" => Ok(OutputFormat::Text),
            other => Err(Error::InvalidConfig(format!(
                "unknown output format `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub level: f64,
    pub methods: Vec<VarianceModel>,
    /// Seed for bootstrap intervals.
    pub seed: Option<u64>,
    pub output_format: OutputFormat,
    /// Variance used by the `5k + 10` test.
    pub test_model: VarianceModel,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            level: 0.95,
            methods: Vec::new(),
            seed: None,
            output_format: OutputFormat::Json,
            test_model: default_cutoff_model(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOfThumb {
    pub threshold: f64,
    pub exceeded: bool,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodError {
    pub method: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailSafeReport {
    pub n_r: f64,
    pub n_r_raw: f64,
    pub k: u64,
    pub sum_z: f64,
    pub stouffer_z: f64,
    pub alpha: f64,
    pub below_threshold: bool,
    pub rule_of_thumb: RuleOfThumb,
    pub intervals: Vec<Interval>,
    pub test: Option<TestOutcome>,
    /// Undefined when the combined test is not significant.
    pub iyengar_greenhouse: Option<f64>,
    pub errors: Vec<MethodError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    Failure,
    Partial,
    Usage,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Failure => 1,
            ExitStatus::Partial => 2,
            ExitStatus::Usage => 64,
        }
    }
}

pub const DEFAULT_SEED: u64 = 0x5eed;

/// Compute the full report. Per-method failures are collected in `errors`.
pub fn analyze(config: &AnalysisConfig, sample: &ZSample) -> Result<(FailSafeReport, ExitStatus)> {
    let sample = if sample.alpha() == config.alpha {
        sample.clone()
    } else {
        ZSample::new(sample.z().to_vec(), config.alpha)?
    };
    let est: FailSafeEstimate = rosenthal_nr(&sample)?;
    let seed = config.seed.unwrap_or(DEFAULT_SEED);
    let mut intervals = Vec::new();
    let mut errors = Vec::new();
    for &m in &config.methods {
        match compute_interval(&est, &sample, m, config.level, seed) {
            Ok(i) => intervals.push(i),
            Err(e) => errors.push(MethodError {
                method: m.to_string(),
                message: e.to_string(),
            }),
        }
    }
    let test = model_variance(&config.test_model, &sample)
        .and_then(|v| failsafe_test(&est, v, config.alpha));
    let test = match test {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(MethodError {
                method: format!("test:{}", config.test_model),
                message: e.to_string(),
            });
            None
        }
    };
    let exceeded = est.exceeds_rule_of_thumb();
    let report = FailSafeReport {
        n_r: est.n_r,
        n_r_raw: est.n_r_raw,
        k: est.k,
        sum_z: est.sum_z,
        stouffer_z: est.stouffer_z,
        alpha: est.alpha,
        below_threshold: est.below_threshold,
        rule_of_thumb: RuleOfThumb {
            threshold: est.rule_of_thumb_threshold(),
            exceeded,
            verdict: if exceeded { "exceeded" } else { "not exceeded" }.into(),
        },
        intervals,
        test,
        iyengar_greenhouse: iyengar_greenhouse_n(&sample).ok(),
        errors,
    };
    let attempted = config.methods.len() + 1;
    let status = match report.errors.len() {
        0 => ExitStatus::Success,
        n if n >= attempted => ExitStatus::Failure,
        _ => ExitStatus::Partial,
    };
    Ok((report, status))
}

/// `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

pub fn render_text(r: &FailSafeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "k                  {}", r.k);
    let _ = writeln!(s, "sum z              {}", sig6(r.sum_z));
    let _ = writeln!(s, "Stouffer Z         {}", sig6(r.stouffer_z));
    let _ = writeln!(s, "alpha              {}", sig6(r.alpha));
    let _ = writeln!(
        s,
        "fail-safe N        {}{}",
        sig6(r.n_r),
        if r.below_threshold {
            "  (combined test not significant)"
        } else {
            ""
        }
    );
    let _ = writeln!(
        s,
        "5k + 10            {} ({})",
        sig6(r.rule_of_thumb.threshold),
        r.rule_of_thumb.verdict
    );
    match r.iyengar_greenhouse {
        Some(n) => {
            let _ = writeln!(s, "Iyengar-Greenhouse {}", sig6(n));
        }
        None => {
            let _ = writeln!(s, "Iyengar-Greenhouse undefined");
        }
    }
    for i in &r.intervals {
        let _ = writeln!(
            s,
            "{:.0}% CI  {:<32} ({}, {}){}",
            i.level * 100.0,
            i.method.to_string(),
            sig6(i.lower),
            sig6(i.upper),
            if i.negative_lower { "  lower < 0" } else { "" }
        );
    }
    if let Some(t) = &r.test {
        let _ = writeln!(
            s,
            "test N > 5k + 10   T = {}, critical {}, {}",
            sig6(t.statistic),
            sig6(t.critical),
            if t.reject { "reject" } else { "do not reject" }
        );
    }
    for e in &r.errors {
        let _ = writeln!(s, "error [{}] {}", e.method, e.message);
    }
    s
}

/// Interval table: `method, lower, upper, level, variance`.
pub fn write_report_csv<W: Write>(r: &FailSafeReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "lower", "upper", "level", "variance", "n_r", "k"])?;
    for i in &r.intervals {
        w.write_record([
            i.method.to_string(),
            i.lower.to_string(),
            i.upper.to_string(),
            i.level.to_string(),
            i.variance_used.to_string(),
            r.n_r.to_string(),
            r.k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
