//! The `ivqr` command line: argument parsing, report assembly and output.
//!
//! Reports go to `--out` (CSV by default, or JSON) with a plain-text table on
//! stdout; without `--out` the report itself goes to stdout.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{default_cache_dir, fetch_card_archive, load_csv_report, Dataset, RoleMap, CARD_ARCHIVE_URL};
use crate::error::{Error, Result};
use crate::first_stage::{
    fit_first_stage_with, significance_stars, two_stage_least_squares, wald_test, CovarianceKind, FirstStageResult,
};
use crate::ivqr::{fit_ivqr_warm, AlphaGrid, IvqrFit, IvqrWarning, WeightingMode};
use crate::montecarlo::{
    power_experiment, power_to_wide_csv, rejection_experiment, report_to_csv, DgpConfig, Method, PowerPoint,
    SimulationReport, Sweep, DEFAULT_NOMINAL_LEVELS,
};
use crate::stats::{chisq_sf, norm_cdf};
use crate::weights::{sparsity_weights_detailed, WeightVector};

#[derive(Debug, Parser)]
#[command(name = "ivqr", version, about = "Instrumental-variables quantile regression and its first stage")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Grid-search IVQR estimates and objective curves.
    Fit(FitArgs),
    /// Density-weighted first stages, Wald tests and the 2SLS first stage.
    FirstStage(FirstStageArgs),
    /// Rejection rates of the first-stage Wald test on simulated data.
    Simulate(SimulateArgs),
    /// Rejection rates along a location or scale sweep.
    Power(PowerArgs),
    /// First and second stages on the returns-to-schooling data.
    ReplicateCard(CardArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    /// Plain-text table.
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Location,
    Scale,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Role mapping (`outcome = ...`, `endogenous = ...`, ...).
    #[arg(long)]
    pub map: PathBuf,
    /// Do not add an intercept even if the mapping asks for one.
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Defaults to csv with --out and to a table otherwise.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_tau, default_values_t = [0.25, 0.5, 0.75])]
    pub tau: Vec<f64>,
    /// `lo:step:hi`.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid, default_value = "-1:0.02:3")]
    pub grid: AlphaGrid,
    #[arg(long = "A", value_parser = parse_mode, default_value = "invcov")]
    pub a_mode: WeightingMode,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct FirstStageArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub spec: TableArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_tau, default_values_t = [0.25, 0.5, 0.75])]
    pub tau: Vec<f64>,
    /// `lo:step:hi`; defaults to -1:0.02:3, or 0:0.004:1 for replicate-card.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid)]
    pub grid: Option<AlphaGrid>,
    #[arg(long = "A", value_parser = parse_mode, default_value = "invcov")]
    pub a_mode: WeightingMode,
    /// Instruments tested jointly; repeat the flag for several tests.
    /// Defaults to one test per instrument.
    #[arg(long = "test")]
    pub test: Vec<String>,
    #[arg(long, value_parser = parse_cov, default_value = "hc0")]
    pub cov: CovarianceKind,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub a: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub b: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub phi: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub c1: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub rho: f64,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_tau, default_values_t = [0.25, 0.5, 0.75])]
    pub tau: Vec<f64>,
    #[arg(long, allow_hyphen_values = true, value_parser = parse_grid, default_value = "-1:0.02:3")]
    pub grid: AlphaGrid,
    #[arg(long = "A", value_parser = parse_mode, default_value = "identity")]
    pub a_mode: WeightingMode,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_level, default_values_t = DEFAULT_NOMINAL_LEVELS)]
    pub nominal: Vec<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, value_enum)]
    pub sweep: SweepKind,
    /// Values of `a` (location) or `b` (scale).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
    pub values: Vec<f64>,
    #[arg(long, value_parser = parse_level, default_value_t = 0.05)]
    pub nominal: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CardArgs {
    /// Alternative CSV; the shipped extract is used otherwise.
    #[arg(long, requires = "map")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub map: Option<PathBuf>,
    /// Download and unpack the original archive into the cache first.
    #[arg(long)]
    pub fetch: bool,
    /// Overrides IVQR_CACHE_DIR.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, default_value = CARD_ARCHIVE_URL, hide = true)]
    pub url: String,
    #[command(flatten)]
    pub spec: TableArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_tau(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("quantile level {v} is outside (0, 1)"))
    }
}

fn parse_level(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("nominal level {v} is outside (0, 1]"))
    }
}

fn parse_grid(s: &str) -> std::result::Result<AlphaGrid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<WeightingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_cov(s: &str) -> std::result::Result<CovarianceKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .try_init();
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => cmd_fit(&args),
        Command::FirstStage(args) => cmd_first_stage(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Power(args) => cmd_power(&args),
        Command::ReplicateCard(args) => cmd_replicate_card(&args),
    }
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let map = RoleMap::from_file(&args.map)?;
    let report = load_csv_report(&args.data, &map, map.intercept && !args.no_intercept)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.rows_dropped > 0 {
        log::info!(
            "dropped {} of {} rows with missing values",
            report.rows_dropped,
            report.rows_read
        );
    }
    Ok(report.dataset)
}

// Writes the report to `--out` and the table to stdout, or the report
// alone to stdout.
fn emit(output: &OutputArgs, csv: impl FnOnce() -> Result<String>, json: impl FnOnce() -> Result<String>, table: &str) -> Result<()> {
    let format = output
        .format
        .unwrap_or(if output.out.is_some() { Format::Csv } else { Format::Table });
    let body = match format {
        Format::Csv => csv()?,
        Format::Json => json()?,
        Format::Table => table.to_string(),
    };
    match &output.out {
        Some(path) => {
            write_file(path, &body)?;
            print!("{table}");
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub term: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub tau: f64,
    pub endogenous: String,
    pub alpha_hat: f64,
    pub beta_hat: Vec<Term>,
    pub gamma_hat: Vec<Term>,
    pub grid: String,
    pub weighting: String,
    pub objective_curve: Vec<CurvePoint>,
    pub warnings: Vec<IvqrWarning>,
}

impl FitReport {
    pub fn new(data: &Dataset, fit: &IvqrFit, grid: &AlphaGrid, mode: WeightingMode) -> Self {
        let names = data.names();
        let label = |names: &[String], v: &[f64]| {
            names
                .iter()
                .zip(v)
                .map(|(t, &e)| Term {
                    term: t.clone(),
                    estimate: e,
                })
                .collect()
        };
        Self {
            tau: fit.tau,
            endogenous: names.endogenous[0].clone(),
            alpha_hat: fit.alpha_hat,
            beta_hat: label(&names.exogenous, &fit.beta_hat),
            gamma_hat: label(&names.instruments, &fit.gamma_hat),
            grid: grid.to_string(),
            weighting: mode_name(mode).to_string(),
            objective_curve: fit
                .grid
                .iter()
                .zip(&fit.objective_curve)
                .map(|(&alpha, &objective)| CurvePoint { alpha, objective })
                .collect(),
            warnings: fit.warnings.clone(),
        }
    }
}

fn mode_name(mode: WeightingMode) -> &'static str {
    match mode {
        WeightingMode::Identity => "identity",
        WeightingMode::InverseGammaCov => "invcov",
    }
}

/// IVQR fits at each `tau`, each warm-started from the previous one.
pub fn fit_reports(data: &Dataset, taus: &[f64], grid: &AlphaGrid, mode: WeightingMode) -> Result<Vec<FitReport>> {
    data.endogenous()?;
    let mut start: Option<Vec<usize>> = None;
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let fit = fit_ivqr_warm(data, tau, grid, mode, start.as_deref())?;
        start = Some(fit.basis.clone());
        out.push(FitReport::new(data, &fit, grid, mode));
    }
    Ok(out)
}

/// Long format: `tau, section, term, alpha, value` with sections `alpha`,
/// `beta`, `gamma` and `objective`.
pub fn fit_reports_to_csv(reports: &[FitReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tau", "section", "term", "alpha", "value"])?;
    for r in reports {
        let tau = r.tau.to_string();
        let a = r.alpha_hat.to_string();
        w.write_record([&tau, "alpha", &r.endogenous, &a, &a])?;
        for (section, terms) in [("beta", &r.beta_hat), ("gamma", &r.gamma_hat)] {
            for t in terms {
                w.write_record([&tau, section, &t.term, &a, &t.estimate.to_string()])?;
            }
        }
        for p in &r.objective_curve {
            w.write_record([&tau, "objective", "objective", &p.alpha.to_string(), &p.objective.to_string()])?;
        }
    }
    finish_csv(w)
}

fn fit_table(reports: &[FitReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "tau = {}  grid {}  A = {}", r.tau, r.grid, r.weighting);
        let _ = writeln!(s, "  {:<16} {:>12.6}", r.endogenous, r.alpha_hat);
        for t in r.beta_hat.iter().chain(&r.gamma_hat) {
            let _ = writeln!(s, "  {:<16} {:>12.6}", t.term, t.estimate);
        }
        for w in &r.warnings {
            if !matches!(w, IvqrWarning::Discontinuity { .. }) {
                let _ = writeln!(s, "  warning: {w}");
            }
        }
    }
    s
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let data = load(&args.data)?;
    let reports = fit_reports(&data, &args.tau, &args.grid, args.a_mode)?;
    emit(
        &args.output,
        || fit_reports_to_csv(&reports),
        || to_json(&reports),
        &fit_table(&reports),
    )
}

// ---------------------------------------------------------------- first stage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefRow {
    pub term: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// z statistic for coefficients, chi-square statistic for tests.
    pub statistic: Option<f64>,
    pub dof: Option<usize>,
    pub p_value: Option<f64>,
    pub stars: String,
}

impl CoefRow {
    fn normal(term: &str, estimate: f64, se: f64) -> Self {
        let z = estimate / se;
        let p = 2.0 * norm_cdf(-z.abs());
        Self {
            term: term.to_string(),
            estimate,
            std_error: Some(se),
            statistic: Some(z),
            dof: None,
            p_value: Some(p),
            stars: significance_stars(p).to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldRow {
    pub tested: Vec<String>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub stars: String,
}

/// One column of the first-stage table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelColumn {
    pub model: String,
    pub tau: Option<f64>,
    pub bandwidth: Option<f64>,
    pub clipped: usize,
    pub first_stage: Vec<CoefRow>,
    pub wald: Vec<WaldRow>,
    /// Coefficient on the endogenous variable in the structural equation.
    pub second_stage: Option<CoefRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub n: usize,
    pub endogenous: String,
    pub covariance: CovarianceKind,
    pub grid: String,
    pub weighting: String,
    pub columns: Vec<ModelColumn>,
}

impl TableReport {
    pub fn column(&self, model: &str, tau: Option<f64>) -> Option<&ModelColumn> {
        self.columns.iter().find(|c| c.model == model && c.tau == tau)
    }
}

impl ModelColumn {
    pub fn coefficient(&self, term: &str) -> Option<&CoefRow> {
        self.first_stage.iter().find(|r| r.term == term)
    }
}

pub const MODEL_2SLS: &str = "FS-2SLS";
pub const MODEL_IVQR: &str = "FS-IVQR";

/// What to estimate for [`table_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub taus: Vec<f64>,
    pub grid: AlphaGrid,
    pub mode: WeightingMode,
    /// Each inner list is tested jointly; empty means one test per instrument.
    pub tests: Vec<Vec<String>>,
    pub cov: CovarianceKind,
    pub second_stage: bool,
}

fn resolve_tests(data: &Dataset, tests: &[Vec<String>]) -> Result<Vec<Vec<usize>>> {
    if tests.is_empty() {
        return Ok((0..data.p()).map(|j| vec![j]).collect());
    }
    tests.iter().map(|names| data.instrument_indices(names)).collect()
}

fn column_from(
    model: &str,
    data: &Dataset,
    fs: &FirstStageResult,
    tests: &[Vec<usize>],
) -> Result<ModelColumn> {
    let se = fs.std_errors();
    let first_stage = fs
        .names
        .iter()
        .enumerate()
        .map(|(j, t)| CoefRow::normal(t, fs.mu_hat[j], se[j]))
        .collect();
    let instruments = &data.names().instruments;
    let wald = tests
        .iter()
        .map(|idx| {
            let t = wald_test(fs, idx)?;
            Ok(WaldRow {
                tested: idx.iter().map(|&j| instruments[j].clone()).collect(),
                statistic: t.statistic,
                dof: t.dof,
                p_value: t.p_value,
                stars: significance_stars(t.p_value).to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelColumn {
        model: model.to_string(),
        tau: fs.tau,
        bandwidth: fs.weights_used.bandwidth,
        clipped: fs.weights_used.clipped_count,
        first_stage,
        wald,
        second_stage: None,
    })
}

// Test of alpha = 0 from the objective at zero: with the inverse covariance
// of gamma as weighting matrix it is chi-square with p degrees of freedom.
fn alpha_zero_test(fit: &IvqrFit, mode: WeightingMode, p: usize, step: f64) -> Option<(f64, f64)> {
    if mode != WeightingMode::InverseGammaCov {
        return None;
    }
    let i = fit.grid.iter().position(|a| a.abs() <= 1e-9 * step.max(1.0))?;
    let stat = fit.objective_curve[i];
    chisq_sf(stat, p).ok().map(|pv| (stat, pv))
}

/// The FS-2SLS column followed by one density-weighted column per `tau`.
pub fn table_report(data: &Dataset, spec: &TableSpec) -> Result<TableReport> {
    data.endogenous()?;
    let tests = resolve_tests(data, &spec.tests)?;
    let endogenous = data.names().endogenous[0].clone();
    let ols = fit_first_stage_with(data, &WeightVector::unit(data.n()), spec.cov)?;
    let mut columns = vec![column_from(MODEL_2SLS, data, &ols, &tests)?];
    if spec.second_stage {
        let tsls = two_stage_least_squares(data, spec.cov)?;
        let se = tsls.std_errors();
        columns[0].second_stage = Some(CoefRow::normal(&endogenous, tsls.coefficients[0], se[0]));
    }
    let mut start: Option<Vec<usize>> = None;
    for &tau in &spec.taus {
        let mut second = None;
        if spec.second_stage {
            let fit = fit_ivqr_warm(data, tau, &spec.grid, spec.mode, start.as_deref())?;
            start = Some(fit.basis.clone());
            let (statistic, p_value) = alpha_zero_test(&fit, spec.mode, data.p(), spec.grid.step()).unzip();
            second = Some(CoefRow {
                term: endogenous.clone(),
                estimate: fit.alpha_hat,
                std_error: None,
                statistic,
                dof: statistic.map(|_| data.p()),
                p_value,
                stars: p_value.map(significance_stars).unwrap_or("").to_string(),
            });
        }
        let (weights, _, lower) = sparsity_weights_detailed(data, tau, &spec.grid, spec.mode, start.as_deref())?;
        start = Some(lower.basis.clone());
        let fs = fit_first_stage_with(data, &weights, spec.cov)?;
        let mut col = column_from(MODEL_IVQR, data, &fs, &tests)?;
        col.second_stage = second;
        columns.push(col);
    }
    Ok(TableReport {
        n: data.n(),
        endogenous,
        covariance: spec.cov,
        grid: spec.grid.to_string(),
        weighting: mode_name(spec.mode).to_string(),
        columns,
    })
}

pub const TABLE_HEADER: [&str; 10] = [
    "model",
    "tau",
    "section",
    "term",
    "estimate",
    "std_error",
    "statistic",
    "dof",
    "p_value",
    "stars",
];

/// Long format, one row per coefficient or test; blank cells where a field
/// does not apply.
pub fn table_report_to_csv(report: &TableReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER)?;
    for c in &report.columns {
        let tau = opt(c.tau);
        let coef_row = |section: &str, r: &CoefRow| -> Vec<String> {
            vec![
                c.model.clone(),
                tau.clone(),
                section.to_string(),
                r.term.clone(),
                r.estimate.to_string(),
                opt(r.std_error),
                opt(r.statistic),
                r.dof.map(|v| v.to_string()).unwrap_or_default(),
                opt(r.p_value),
                r.stars.clone(),
            ]
        };
        for r in &c.first_stage {
            w.write_record(coef_row("first_stage", r))?;
        }
        for t in &c.wald {
            w.write_record([
                c.model.clone(),
                tau.clone(),
                "wald".to_string(),
                t.tested.join("+"),
                String::new(),
                String::new(),
                t.statistic.to_string(),
                t.dof.to_string(),
                t.p_value.to_string(),
                t.stars.clone(),
            ])?;
        }
        if let Some(r) = &c.second_stage {
            w.write_record(coef_row("second_stage", r))?;
        }
    }
    finish_csv(w)
}

fn render_table(report: &TableReport) -> String {
    let headers: Vec<String> = report
        .columns
        .iter()
        .map(|c| match c.tau {
            Some(t) => format!("{} {t}", c.model),
            None => c.model.clone(),
        })
        .collect();
    let width = 14;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "First stage for {} (n = {}, {:?} standard errors, grid {}, A = {})",
        report.endogenous, report.n, report.covariance, report.grid, report.weighting
    );
    let _ = write!(s, "{:<20}", "");
    for h in &headers {
        let _ = write!(s, "{h:>width$}");
    }
    s.push('\n');
    let Some(first) = report.columns.first() else {
        return s;
    };
    for (j, row) in first.first_stage.iter().enumerate() {
        let _ = write!(s, "{:<20}", row.term);
        for c in &report.columns {
            let r = &c.first_stage[j];
            let _ = write!(s, "{:>width$}", format!("{:.3}{}", r.estimate, r.stars));
        }
        s.push('\n');
        let _ = write!(s, "{:<20}", "");
        for c in &report.columns {
            let se = c.first_stage[j].std_error.unwrap_or(f64::NAN);
            let _ = write!(s, "{:>width$}", format!("({se:.4})"));
        }
        s.push('\n');
    }
    for (j, t) in first.wald.iter().enumerate() {
        let _ = write!(s, "{:<20}", format!("Wald {}", t.tested.join("+")));
        for c in &report.columns {
            let t = &c.wald[j];
            let _ = write!(s, "{:>width$}", format!("{:.3}{}", t.statistic, t.stars));
        }
        s.push('\n');
        let _ = write!(s, "{:<20}", "");
        for c in &report.columns {
            let _ = write!(s, "{:>width$}", format!("[{:.4}]", c.wald[j].p_value));
        }
        s.push('\n');
    }
    if report.columns.iter().any(|c| c.second_stage.is_some()) {
        let _ = write!(s, "{:<20}", format!("Second stage {}", report.endogenous));
        for c in &report.columns {
            let cell = c
                .second_stage
                .as_ref()
                .map(|r| format!("{:.3}{}", r.estimate, r.stars))
                .unwrap_or_default();
            let _ = write!(s, "{cell:>width$}");
        }
        s.push('\n');
    }
    let clipped: Vec<String> = report
        .columns
        .iter()
        .filter(|c| c.clipped > 0)
        .map(|c| format!("{} at tau {}", c.clipped, opt(c.tau)))
        .collect();
    if !clipped.is_empty() {
        let _ = writeln!(s, "clipped density weights: {}", clipped.join(", "));
    }
    let _ = writeln!(s, "*** p<0.01, ** p<0.05, * p<0.1");
    s
}

fn table_spec(args: &TableArgs, default_grid: AlphaGrid, second_stage: bool) -> TableSpec {
    TableSpec {
        taus: args.tau.clone(),
        grid: args.grid.unwrap_or(default_grid),
        mode: args.a_mode,
        tests: args
            .test
            .iter()
            .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .collect(),
        cov: args.cov,
        second_stage,
    }
}

fn emit_table(output: &OutputArgs, report: &TableReport) -> Result<()> {
    emit(
        output,
        || table_report_to_csv(report),
        || to_json(report),
        &render_table(report),
    )
}

fn cmd_first_stage(args: &FirstStageArgs) -> Result<()> {
    let data = load(&args.data)?;
    let spec = table_spec(&args.spec, AlphaGrid::simulation_default(), false);
    let report = table_report(&data, &spec)?;
    emit_table(&args.output, &report)
}

fn cmd_replicate_card(args: &CardArgs) -> Result<()> {
    if args.fetch {
        let cache = args.cache_dir.clone().unwrap_or_else(default_cache_dir);
        let dir = fetch_card_archive(&args.url, &cache)?;
        eprintln!("original archive unpacked in {}", dir.display());
    }
    let data = match (&args.data, &args.map) {
        (Some(data), Some(map)) => load(&DataArgs {
            data: data.clone(),
            map: map.clone(),
            no_intercept: false,
        })?,
        _ => crate::dataset::card_dataset()?,
    };
    let spec = table_spec(&args.spec, AlphaGrid::card_default(), true);
    let report = table_report(&data, &spec)?;
    emit_table(&args.output, &report)
}

// ---------------------------------------------------------------- simulation

fn design_config(d: &DesignArgs) -> Result<DgpConfig> {
    let mut c = DgpConfig::new(d.n, d.a, d.b, d.phi);
    c.c1 = d.c1;
    c.rho = d.rho;
    c.replications = d.reps;
    c.master_seed = d.seed;
    c.tau_list = d.tau.clone();
    c.grid = d.grid;
    c.a_mode = d.a_mode;
    c.threads = d.threads;
    c.validate()?;
    Ok(c)
}

fn rates_table(report: &SimulationReport) -> String {
    let mut nominal: Vec<f64> = Vec::new();
    for c in &report.cells {
        if !nominal.contains(&c.nominal) {
            nominal.push(c.nominal);
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "n = {}, a = {}, b = {}, phi = {}, {} replications, seed {}",
        report.n, report.a, report.b, report.phi, report.replications, report.master_seed
    );
    let _ = write!(s, "{:<8}{:<20}", "tau", "method");
    for v in &nominal {
        let _ = write!(s, "{:>10}", v);
    }
    s.push('\n');
    let mut seen: Vec<(f64, Method)> = Vec::new();
    for c in &report.cells {
        if seen.contains(&(c.tau, c.method)) {
            continue;
        }
        seen.push((c.tau, c.method));
        let _ = write!(s, "{:<8}{:<20}", c.tau, c.method.label());
        for &v in &nominal {
            let rate = report.rate(c.tau, v, c.method).unwrap_or(f64::NAN);
            let _ = write!(s, "{rate:>10.3}");
        }
        s.push('\n');
    }
    if report.failed() > 0 {
        let _ = writeln!(s, "failed arm fits: {}", report.failed());
    }
    s
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let config = design_config(&args.design)?;
    let started = Instant::now();
    let report = rejection_experiment(&config, &args.nominal)?;
    log::info!("simulation finished in {:.1}s", started.elapsed().as_secs_f64());
    emit(
        &args.output,
        || report_to_csv(&report),
        || to_json(&report),
        &rates_table(&report),
    )
}

fn cmd_power(args: &PowerArgs) -> Result<()> {
    let config = design_config(&args.design)?;
    let values = args.values.clone();
    let sweep = match args.sweep {
        SweepKind::Location => Sweep::Location(values),
        SweepKind::Scale => Sweep::Scale(values),
    };
    let points: Vec<PowerPoint> = power_experiment(&config, &sweep, &[args.nominal])?;
    let table: String = points
        .iter()
        .map(|p| format!("{} = {}\n{}", sweep.name(), p.sweep_value, rates_table(&p.report)))
        .collect();
    emit(
        &args.output,
        || power_to_wide_csv(&sweep, &points, args.nominal),
        || to_json(&points),
        &table,
    )
}
