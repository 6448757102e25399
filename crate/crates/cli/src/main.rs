use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failsafe_core::estimators::KModel;
use failsafe_core::inference::{
    ci_from_summary, cutoff_table, default_cutoff_model, failsafe_test, model_variance,
};
use failsafe_core::io::{
    analyze, ingest, render_text, sig6, write_cutoffs_csv, write_report_csv, AnalysisConfig,
    ExitStatus, IngestOptions, OutputFormat, Schema,
};
use failsafe_core::simlab::{
    data_dist_label, paper_grid, parse_data_dist, run_grid, write_coverage_csv, write_plot_data,
    CiKind, CoverageReport, CoverageScenario, Truth,
};
use failsafe_core::{Assumption, Error, FailSafeEstimate, VarianceModel, Variant};

const DESK_REPS: usize = 2000;
const DESK_BOOT_REPS: usize = 500;

#[derive(Parser)]
#[command(
    name = "failsafe",
    version,
    about = "Rosenthal's fail-safe number with confidence intervals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fail-safe number, intervals, test and Iyengar-Greenhouse for a CSV of studies
    Analyze(AnalyzeArgs),
    /// Cutoffs above which N_R is significantly larger than 5k + 10
    Cutoffs(CutoffArgs),
    /// Monte Carlo coverage of the confidence intervals
    Simulate(SimulateArgs),
    /// One-sided test of N_R > 5k + 10
    Test(TestArgs),
}

#[derive(Args)]
struct InputArgs {
    /// CSV with a `z` column or `effect` and `se` columns; `#` starts a comment
    input: PathBuf,
    /// Negate every z-score
    #[arg(long)]
    flip_sign: bool,
    /// Require a particular column layout instead of detecting it
    #[arg(long, value_parser = parse_schema)]
    schema: Option<Schema>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Variance model, e.g. fixed-dist:half-normal:exact, random-moment, bootstrap (repeatable)
    #[arg(long = "method", value_parser = check_model)]
    methods: Vec<String>,
    /// Replicates for `bootstrap` methods given without a count
    #[arg(long, default_value_t = 1000)]
    boot_reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "json", value_parser = parse_format)]
    format: OutputFormat,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CutoffArgs {
    #[arg(long, default_value_t = 160)]
    k_max: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Distribution-based variance model
    #[arg(long, value_parser = parse_model)]
    method: Option<VarianceModel>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// std-normal, half-normal, skew-normal(<delta>), skew-neg or skew-pos
    #[arg(long, default_value = "half-normal")]
    data_dist: String,
    /// Interval recipe: fixed-dist:<assumption>[:exact|:largek], fixed-moment, random-dist:<assumption>, random-moment or bootstrap
    #[arg(long, default_value = "fixed-dist:half-normal", value_parser = check_model)]
    ci: String,
    /// Assumption whose (mu, sigma2) define the target for moment and bootstrap intervals
    /// (defaults to the data distribution)
    #[arg(long, value_parser = parse_assumption)]
    column: Option<Assumption>,
    /// Study-count model for bootstrap intervals
    #[arg(long, default_value = "fixed", value_parser = parse_k_model)]
    k_model: KModel,
    /// Score against the generating distribution instead of the assumption
    #[arg(long)]
    generating_truth: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [5u64, 15, 30, 50])]
    k: Vec<u64>,
    #[arg(long, default_value_t = DESK_REPS)]
    reps: usize,
    #[arg(long, default_value_t = DESK_BOOT_REPS)]
    boot_reps: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// Run the full 96-scenario grid instead of one scenario
    #[arg(long)]
    grid: bool,
    /// Allow bootstrap cells above 2000 replicates × 500 resamples
    #[arg(long)]
    full_scale: bool,
    /// Coverage CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Long-format plot data; defaults to `<out>.plot.csv` when --out is given
    #[arg(long)]
    plot_out: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    /// CSV of studies; omit to test a summary given by --n-r and --k
    input: Option<PathBuf>,
    #[arg(long, requires = "k", conflicts_with = "input")]
    n_r: Option<f64>,
    #[arg(long, requires = "n_r")]
    k: Option<u64>,
    #[arg(long)]
    flip_sign: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Variance model for the test statistic
    #[arg(long, value_parser = parse_model)]
    method: Option<VarianceModel>,
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: OutputFormat,
}

fn parse_model(s: &str) -> Result<VarianceModel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn check_model(s: &str) -> Result<String, String> {
    parse_model(s).map(|_| s.to_string())
}

/// A bare `bootstrap` takes its resample count from `--boot-reps`.
fn resolve_model(s: &str, boot_reps: usize) -> Result<VarianceModel, Error> {
    if s.trim() == "bootstrap" {
        let m = VarianceModel::Bootstrap {
            replicates: boot_reps,
        };
        m.validate()?;
        Ok(m)
    } else {
        s.parse()
    }
}

fn parse_assumption(s: &str) -> Result<Assumption, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<OutputFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_schema(s: &str) -> Result<Schema, String> {
    match s {
        "z" => Ok(Schema::Z),
        "effect-se" => Ok(Schema::EffectSe),
        _ => Err(format!("unknown schema `{s}` (z, effect-se)")),
    }
}

fn parse_k_model(s: &str) -> Result<KModel, String> {
    match s {
        "fixed" => Ok(KModel::Fixed),
        "random" => Ok(KModel::Random),
        _ => Err(format!("unknown k model `{s}` (fixed, random)")),
    }
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(m) => Failure::Usage(m),
            e => Failure::Run(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => {
            Box::new(File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<ExitStatus, Failure> {
    let sample = ingest(
        &a.input.input,
        &IngestOptions {
            schema: a.input.schema,
            alpha: a.alpha,
            flip_sign: a.input.flip_sign,
        },
    )?;
    let mut names = a.methods;
    if names.is_empty() {
        names = [
            "fixed-dist:half-normal:largek",
            "fixed-moment:largek",
            "random-dist:half-normal",
            "random-moment",
            "bootstrap",
        ]
        .map(String::from)
        .to_vec();
    }
    let methods = names
        .iter()
        .map(|m| resolve_model(m, a.boot_reps))
        .collect::<Result<Vec<_>, _>>()?;
    let config = AnalysisConfig {
        alpha: a.alpha,
        level: a.level,
        methods,
        seed: a.seed,
        output_format: a.format,
        ..Default::default()
    };
    let (report, status) = analyze(&config, &sample)?;
    let mut out = open_out(a.out.as_deref())?;
    match a.format {
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, &report)
                .map_err(|e| Error::Io(e.to_string()))?;
            writeln!(out)?;
        }
        OutputFormat::Csv => write_report_csv(&report, &mut out)?,
        OutputFormat::Text => out.write_all(render_text(&report).as_bytes())?,
    }
    Ok(status)
}

fn cmd_cutoffs(a: CutoffArgs) -> Result<ExitStatus, Failure> {
    if a.k_max == 0 {
        return Err(Failure::Usage("--k-max must be at least 1".into()));
    }
    let rows = cutoff_table(
        a.k_max,
        a.alpha,
        a.method.unwrap_or_else(default_cutoff_model),
    )?;
    if !rows.windows(2).all(|w| w[0].cutoff <= w[1].cutoff) {
        return Err(Failure::Run(Error::Degenerate(
            "cutoffs are not monotone".into(),
        )));
    }
    write_cutoffs_csv(&rows, open_out(a.out.as_deref())?)?;
    Ok(ExitStatus::Success)
}

fn scenario_from(a: &SimulateArgs) -> Result<CoverageScenario, Failure> {
    let data = parse_data_dist(&a.data_dist)?;
    let data_assumption: Assumption = data_dist_label(&data).parse()?;
    let column = a.column.unwrap_or(data_assumption);
    let model = resolve_model(&a.ci, a.boot_reps)?;
    let (ci, assumption, variant, k_model) = match model {
        VarianceModel::FixedDistribution {
            assumption,
            variant,
        } => (CiKind::Distribution, assumption, variant, KModel::Fixed),
        VarianceModel::RandomDistribution { assumption } => (
            CiKind::Distribution,
            assumption,
            Variant::LargeK,
            KModel::Random,
        ),
        VarianceModel::FixedMoment { variant } => (CiKind::Moment, column, variant, KModel::Fixed),
        VarianceModel::RandomMoment => (CiKind::Moment, column, Variant::LargeK, KModel::Random),
        VarianceModel::Bootstrap { .. } => (CiKind::Bootstrap, column, Variant::LargeK, a.k_model),
    };
    let boot_replicates = match model {
        VarianceModel::Bootstrap { replicates } => replicates,
        _ => a.boot_reps,
    };
    let mut s = CoverageScenario::new(data, assumption, ci);
    s.variant = variant;
    s.k_model = k_model;
    s.truth = if a.generating_truth {
        Truth::Generating
    } else {
        Truth::Column
    };
    s.k_values = a.k.clone();
    s.replicates = a.reps;
    s.boot_replicates = boot_replicates;
    s.level = a.level;
    s.alpha = a.alpha;
    s.seed = a.seed;
    s.validate()?;
    Ok(s)
}

fn check_scale(scenarios: &[CoverageScenario], full_scale: bool) -> Result<(), Failure> {
    let heavy = scenarios.iter().any(|s| {
        s.ci == CiKind::Bootstrap
            && (s.replicates > DESK_REPS || s.boot_replicates > DESK_BOOT_REPS)
    });
    if heavy && !full_scale {
        return Err(Failure::Usage(format!(
            "bootstrap cells above {DESK_REPS} replicates × {DESK_BOOT_REPS} resamples need --full-scale"
        )));
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitStatus, Failure> {
    if a.threads == Some(0) {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let scenarios = if a.grid {
        let grid = paper_grid(a.seed, a.reps, a.boot_reps);
        for s in &grid {
            s.validate()?;
        }
        grid
    } else {
        vec![scenario_from(&a)?]
    };
    check_scale(&scenarios, a.full_scale)?;

    let mut reports: Vec<CoverageReport> = Vec::new();
    let mut failed = 0;
    for (s, r) in scenarios.iter().zip(run_grid(&scenarios, a.threads)) {
        match r {
            Ok(r) => reports.push(r),
            Err(e) => {
                failed += 1;
                eprintln!(
                    "scenario {} / {}: {e}",
                    data_dist_label(&s.data_dist),
                    s.variance_model()
                );
            }
        }
    }
    write_coverage_csv(&reports, open_out(a.out.as_deref())?)?;
    let plot = a.plot_out.clone().or_else(|| {
        a.out.as_ref().map(|p| {
            let mut name = p.file_stem().unwrap_or_default().to_os_string();
            name.push(".plot.csv");
            p.with_file_name(name)
        })
    });
    if let Some(p) = plot {
        write_plot_data(&reports, open_out(Some(&p))?)?;
    }
    for r in &reports {
        let cells: Vec<String> = r
            .cells
            .iter()
            .map(|c| format!("k={} {}", c.k, sig6(c.coverage)))
            .collect();
        eprintln!(
            "{} {} {}: {}",
            r.data_label(),
            r.scenario.variance_model(),
            r.scenario.assumption,
            cells.join(", ")
        );
    }
    Ok(match (failed, reports.len()) {
        (0, _) => ExitStatus::Success,
        (_, 0) => ExitStatus::Failure,
        _ => ExitStatus::Partial,
    })
}

fn cmd_test(a: TestArgs) -> Result<ExitStatus, Failure> {
    let model = a.method.unwrap_or_else(default_cutoff_model);
    if model.is_bootstrap() {
        return Err(Failure::Usage(
            "the test needs an analytic variance model".into(),
        ));
    }
    let (est, variance) = match (&a.input, a.n_r, a.k) {
        (Some(path), _, _) => {
            let sample = ingest(
                path,
                &IngestOptions {
                    schema: None,
                    alpha: a.alpha,
                    flip_sign: a.flip_sign,
                },
            )?;
            let est = failsafe_core::rosenthal_nr(&sample)?;
            (est, model_variance(&model, &sample)?)
        }
        (None, Some(n_r), Some(k)) => {
            if n_r < 0.0 || k == 0 {
                return Err(Failure::Usage("--n-r must be >= 0 and --k >= 1".into()));
            }
            let est =
                FailSafeEstimate::from_sum(failsafe_core::invert_nr(n_r, k, a.alpha)?, k, a.alpha)?;
            let var = ci_from_summary(n_r, k, a.alpha, model, 0.95)?.variance_used;
            (est, var)
        }
        _ => {
            return Err(Failure::Usage(
                "give an input file or --n-r with --k".into(),
            ))
        }
    };
    let t = failsafe_test(&est, variance, a.alpha)?;
    let mut out = io::stdout().lock();
    match a.format {
        OutputFormat::Json => {
            let v = serde_json::json!({
                "n_r": est.n_r,
                "k": est.k,
                "method": model.to_string(),
                "test": t,
            });
            writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&v).map_err(|e| Error::Io(e.to_string()))?
            )?;
        }
        _ => writeln!(
            out,
            "N_R = {}, 5k + 10 = {}, T = {}, critical {}: {}",
            sig6(est.n_r),
            sig6(t.null_value),
            sig6(t.statistic),
            sig6(t.critical),
            if t.reject {
                "reject (N_R significantly above 5k + 10)"
            } else {
                "do not reject"
            }
        )?,
    }
    Ok(ExitStatus::Success)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                ExitStatus::Usage.code() as u8
            } else {
                0
            });
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Cutoffs(a) => cmd_cutoffs(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Test(a) => cmd_test(a),
    };
    let status = match result {
        Ok(s) => s,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitStatus::Usage
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitStatus::Failure
        }
    };
    ExitCode::from(status.code() as u8)
}
