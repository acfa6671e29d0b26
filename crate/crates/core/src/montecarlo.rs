//! Simulation designs and rejection-rate experiments for the first-stage
//! Wald test.
//!
//! The location-scale design is
//!
//! ```text
//! y = d + x + (1 + c d) u
//! d = c1 + a z1 + phi z2 + (1 + b z1) v
//! ```
//!
//! with `x, z1, z2 ~ U(0, 1)` and `(u, v)` standard bivariate normal with
//! correlation `rho`; `c = 1` unless overridden. Every replication draws from
//! its own random stream `(master_seed, rep)`, so results do not depend on
//! how replications are scheduled across threads. The three test arms of a
//! replication (unit weights, true density weights, sparsity weights) share
//! one dataset.
//!
//! A mixture-density design, where the conditional quantile of `u` given `d`
//! has no closed form, is not provided.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::first_stage::{fit_first_stage, wald_test, wald_test_unchecked, FirstStageResult, WaldTest};
use crate::ivqr::{AlphaGrid, WeightingMode};
use crate::stats::{bivariate_normal_sample, norm_pdf, norm_quantile, RngStream};
use crate::weights::{sparsity_weights_detailed, WeightSource, WeightVector};

pub const DEFAULT_NOMINAL_LEVELS: [f64; 3] = [0.10, 0.05, 0.01];
pub const DEFAULT_TAUS: [f64; 3] = [0.25, 0.50, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FS-2SLS")]
    Fs2sls,
    #[serde(rename = "FS-IVQR-true-f")]
    TrueDensity,
    #[serde(rename = "FS-IVQR-sparsity")]
    Sparsity,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fs2sls, Method::TrueDensity, Method::Sparsity];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Fs2sls => "FS-2SLS",
            Method::TrueDensity => "FS-IVQR-true-f",
            Method::Sparsity => "FS-IVQR-sparsity",
        }
    }

    /// Position in [`Method::ALL`].
    pub fn index(&self) -> usize {
        match self {
            Method::Fs2sls => 0,
            Method::TrueDensity => 1,
            Method::Sparsity => 2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    pub c1: f64,
    pub rho: f64,
    /// Structural scale `c` in `(1 + c d) u`.
    pub scale: f64,
    pub tau_list: Vec<f64>,
    pub replications: usize,
    pub master_seed: u64,
    pub grid: AlphaGrid,
    pub a_mode: WeightingMode,
    /// Worker threads; `None` uses the global pool. Results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl DgpConfig {
    /// Defaults: `c1 = 10`, `rho = 0.5`, `c = 1`, taus {0.25, 0.5, 0.75},
    /// 500 replications, seed 1, grid `[-1, 3]` step 0.02, identity `A`.
    pub fn new(n: usize, a: f64, b: f64, phi: f64) -> Self {
        Self {
            n,
            a,
            b,
            phi,
            c1: 10.0,
            rho: 0.5,
            scale: 1.0,
            tau_list: DEFAULT_TAUS.to_vec(),
            replications: 500,
            master_seed: 1,
            grid: AlphaGrid::simulation_default(),
            a_mode: WeightingMode::Identity,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::InvalidArgument(format!("sample size must be at least 50, got {}", self.n)));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidArgument(format!("|rho| must be below 1, got {}", self.rho)));
        }
        if self.replications == 0 {
            return Err(Error::InvalidArgument("at least one replication is required".into()));
        }
        if self.tau_list.is_empty() || self.tau_list.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidArgument("quantile levels must lie in (0, 1)".into()));
        }
        for (name, v) in [("a", self.a), ("b", self.b), ("phi", self.phi), ("c1", self.c1), ("scale", self.scale)] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// `z2` enters as an instrument only when it moves `d`.
    pub fn uses_second_instrument(&self) -> bool {
        self.phi != 0.0
    }
}

/// One draw of the design for replication `rep`. Columns: `x = (1, x)`,
/// `z = (z1, z2)`, or `z = (z1)` when `phi = 0`.
pub fn simulate_dgp(config: &DgpConfig, rep: u64) -> Result<Dataset> {
    config.validate()?;
    let n = config.n;
    let mut rng = RngStream::new(config.master_seed, rep);
    let (mut y, mut d, mut x, mut z1, mut z2) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for _ in 0..n {
        let xi = rng.uniform();
        let z1i = rng.uniform();
        let z2i = rng.uniform();
        let (u, v) = bivariate_normal_sample(&mut rng, config.rho)?;
        let di = config.c1 + config.a * z1i + config.phi * z2i + (1.0 + config.b * z1i) * v;
        y.push(di + xi + (1.0 + config.scale * di) * u);
        d.push(di);
        x.push(xi);
        z1.push(z1i);
        z2.push(z2i);
    }
    let z = if config.uses_second_instrument() {
        vec![z1, z2]
    } else {
        vec![z1]
    };
    Dataset::from_columns(y, d, vec![x], z, true)
}

/// Location-scale design without covariates: `y = d + (1 + c d) u`,
/// `d = a z + v`, `z ~ N(0, 1)`. With `c = 0` the density of the quantile
/// error is the constant `phi(Phi^{-1}(tau)) / sqrt(1 - rho^2)`.
pub fn simulate_location_scale(n: usize, a: f64, c: f64, rho: f64, seed: u64, rep: u64) -> Result<Dataset> {
    let mut rng = RngStream::new(seed, rep);
    let (mut y, mut d, mut z) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let zi = rng.standard_normal();
        let (u, v) = bivariate_normal_sample(&mut rng, rho)?;
        let di = a * zi + v;
        y.push(di + (1.0 + c * di) * u);
        d.push(di);
        z.push(zi);
    }
    Dataset::from_columns(y, d, Vec::new(), vec![z], true)
}

/// `f_i = phi(Phi^{-1}(tau)) / (|1 + d_i| sqrt(1 - rho^2))`.
pub fn true_density_weights(data: &Dataset, tau: f64, rho: f64) -> Result<WeightVector> {
    true_density_weights_scaled(data, tau, rho, 1.0)
}

/// As [`true_density_weights`] with structural scale `c`: `|1 + c d_i|`.
pub fn true_density_weights_scaled(data: &Dataset, tau: f64, rho: f64, c: f64) -> Result<WeightVector> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("|rho| must be below 1, got {rho}")));
    }
    let base = norm_pdf(norm_quantile(tau)?) / (1.0 - rho * rho).sqrt();
    let d = data.endogenous()?;
    let values = d
        .iter()
        .map(|&di| {
            let s = 1.0 + c * di;
            if s > 0.0 {
                Ok(base / s)
            } else {
                Err(Error::Domain(format!("scale 1 + c d = {s} is not positive")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    WeightVector::from_values(values, Some(tau), WeightSource::TrueDensity)
}

/// Wald statistics for one replication: `tests[t][m]` for `tau_list[t]` and
/// [`Method::ALL`]`[m]`; `None` where that arm failed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub rep: u64,
    pub tests: Vec<[Option<WaldTest>; 3]>,
    pub errors: Vec<String>,
}

fn test_first_instrument(fs: &FirstStageResult, overidentified: bool) -> Result<WaldTest> {
    if overidentified {
        wald_test(fs, &[0])
    } else {
        // z1 is the only instrument; the weights do not come from a model
        // identified by it under the null, see the module docs
        wald_test_unchecked(fs, &[0])
    }
}

/// Runs all three arms on the dataset of replication `rep`, testing
/// `delta_1 = 0` on `z1`.
pub fn run_replication(config: &DgpConfig, rep: u64) -> ReplicationOutcome {
    let mut out = ReplicationOutcome {
        rep,
        tests: vec![[None, None, None]; config.tau_list.len()],
        errors: Vec::new(),
    };
    let data = match simulate_dgp(config, rep) {
        Ok(d) => d,
        Err(e) => {
            out.errors.push(format!("rep {rep}: simulation failed: {e}"));
            return out;
        }
    };
    let overid = data.p() > 1;
    let ols = fit_first_stage(&data, &WeightVector::unit(data.n())).and_then(|fs| test_first_instrument(&fs, overid));
    let mut start: Option<Vec<usize>> = None;
    for (t, &tau) in config.tau_list.iter().enumerate() {
        match &ols {
            Ok(w) => out.tests[t][Method::Fs2sls.index()] = Some(w.clone()),
            Err(e) => out.errors.push(format!("rep {rep} FS-2SLS: {e}")),
        }
        let truth = true_density_weights_scaled(&data, tau, config.rho, config.scale)
            .and_then(|w| fit_first_stage(&data, &w))
            .and_then(|fs| test_first_instrument(&fs, overid));
        match truth {
            Ok(w) => out.tests[t][Method::TrueDensity.index()] = Some(w),
            Err(e) => out.errors.push(format!("rep {rep} tau {tau} true f: {e}")),
        }
        let sparse = sparsity_weights_detailed(&data, tau, &config.grid, config.a_mode, start.as_deref())
            .and_then(|(w, _, lower)| {
                start = Some(lower.basis.clone());
                fit_first_stage(&data, &w)
            })
            .and_then(|fs| test_first_instrument(&fs, overid));
        match sparse {
            Ok(w) => out.tests[t][Method::Sparsity.index()] = Some(w),
            Err(e) => out.errors.push(format!("rep {rep} tau {tau} sparsity: {e}")),
        }
    }
    out
}

/// Outcomes for replications `0..replications`, in replication order.
pub fn run_replications(config: &DgpConfig) -> Result<Vec<ReplicationOutcome>> {
    config.validate()?;
    let work = || -> Vec<ReplicationOutcome> {
        (0..config.replications as u64)
            .into_par_iter()
            .map(|rep| run_replication(config, rep))
            .collect()
    };
    match config.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub tau: f64,
    pub nominal: f64,
    pub method: Method,
    pub rate: f64,
    pub rejections: usize,
    /// Replications in which this arm produced a test.
    pub reps: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    pub replications: usize,
    pub master_seed: u64,
    pub cells: Vec<RateCell>,
    /// Wall-clock seconds; never written to report files.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl SimulationReport {
    pub fn cell(&self, tau: f64, nominal: f64, method: Method) -> Option<&RateCell> {
        self.cells
            .iter()
            .find(|c| c.tau == tau && c.nominal == nominal && c.method == method)
    }

    pub fn rate(&self, tau: f64, nominal: f64, method: Method) -> Option<f64> {
        self.cell(tau, nominal, method).map(|c| c.rate)
    }

    pub fn failed(&self) -> usize {
        self.cells.iter().map(|c| c.failed).max().unwrap_or(0)
    }
}

/// Rejects when `p_value <= nominal`. Cells are ordered by tau, then nominal
/// level, then method.
pub fn aggregate(config: &DgpConfig, outcomes: &[ReplicationOutcome], nominal_levels: &[f64]) -> SimulationReport {
    let mut cells = Vec::new();
    for (t, &tau) in config.tau_list.iter().enumerate() {
        for &nominal in nominal_levels {
            for method in Method::ALL {
                let mut reps = 0;
                let mut rejections = 0;
                let mut failed = 0;
                for o in outcomes {
                    match &o.tests[t][method.index()] {
                        Some(w) => {
                            reps += 1;
                            rejections += (w.p_value <= nominal) as usize;
                        }
                        None => failed += 1,
                    }
                }
                let rate = if reps > 0 { rejections as f64 / reps as f64 } else { f64::NAN };
                cells.push(RateCell {
                    tau,
                    nominal,
                    method,
                    rate,
                    rejections,
                    reps,
                    failed,
                });
            }
        }
    }
    SimulationReport {
        n: config.n,
        a: config.a,
        b: config.b,
        phi: config.phi,
        replications: outcomes.len(),
        master_seed: config.master_seed,
        cells,
        runtime_secs: 0.0,
    }
}

/// Rejection rates for any design.
pub fn rejection_experiment(config: &DgpConfig, nominal_levels: &[f64]) -> Result<SimulationReport> {
    if nominal_levels.is_empty() || nominal_levels.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
        return Err(Error::InvalidArgument("nominal levels must lie in (0, 1]".into()));
    }
    let start = Instant::now();
    let outcomes = run_replications(config)?;
    let failures: usize = outcomes.iter().map(|o| o.errors.len()).sum();
    if failures > 0 {
        log::warn!("{failures} arm failures across {} replications", outcomes.len());
        for e in outcomes.iter().flat_map(|o| &o.errors).take(5) {
            log::warn!("{e}");
        }
    }
    let mut report = aggregate(config, &outcomes, nominal_levels);
    report.runtime_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Size under the null `a = b = 0`.
pub fn size_experiment(config: &DgpConfig, nominal_levels: &[f64]) -> Result<SimulationReport> {
    if config.a != 0.0 || config.b != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "size experiments need a = b = 0, got a = {} and b = {}",
            config.a, config.b
        )));
    }
    rejection_experiment(config, nominal_levels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    /// Vary `a` (location shift of `d` in `z1`).
    Location(Vec<f64>),
    /// Vary `b` (scale of `d`'s error in `z1`).
    Scale(Vec<f64>),
}

impl Sweep {
    pub fn values(&self) -> &[f64] {
        match self {
            Sweep::Location(v) | Sweep::Scale(v) => v,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Location(_) => "location",
            Sweep::Scale(_) => "scale",
        }
    }

    pub fn parse(kind: &str, values: Vec<f64>) -> Result<Self> {
        match kind {
            "location" => Ok(Sweep::Location(values)),
            "scale" => Ok(Sweep::Scale(values)),
            other => Err(Error::InvalidArgument(format!("unknown sweep `{other}`; use location or scale"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub sweep_value: f64,
    pub report: SimulationReport,
}

/// One report per sweep value. Every point reuses the master seed, so the
/// curve is traced with common random numbers.
pub fn power_experiment(config: &DgpConfig, sweep: &Sweep, nominal_levels: &[f64]) -> Result<Vec<PowerPoint>> {
    if sweep.values().is_empty() || sweep.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("sweep values must lie in [0, 1]".into()));
    }
    sweep
        .values()
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            match sweep {
                Sweep::Location(_) => c.a = v,
                Sweep::Scale(_) => c.b = v,
            }
            Ok(PowerPoint {
                sweep_value: v,
                report: rejection_experiment(&c, nominal_levels)?,
            })
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 10] = ["tau", "nominal", "method", "rate", "reps", "n", "a", "b", "phi", "failed"];

/// Writes report rows; `sweep_value`, when given, becomes a trailing column.
pub fn write_report_csv<W: Write>(
    out: &mut csv::Writer<W>,
    report: &SimulationReport,
    sweep_value: Option<f64>,
) -> Result<()> {
    for c in &report.cells {
        let mut row = vec![
            c.tau.to_string(),
            c.nominal.to_string(),
            c.method.label().to_string(),
            c.rate.to_string(),
            c.reps.to_string(),
            report.n.to_string(),
            report.a.to_string(),
            report.b.to_string(),
            report.phi.to_string(),
            c.failed.to_string(),
        ];
        if let Some(v) = sweep_value {
            row.push(v.to_string());
        }
        out.write_record(&row)?;
    }
    Ok(())
}

pub fn report_to_csv(report: &SimulationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER)?;
    write_report_csv(&mut w, report, None)?;
    finish_csv(w)
}

pub fn power_to_csv(points: &[PowerPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = REPORT_HEADER.to_vec();
    header.push("sweep_value");
    w.write_record(&header)?;
    for p in points {
        write_report_csv(&mut w, &p.report, Some(p.sweep_value))?;
    }
    finish_csv(w)
}

/// One row per sweep value with a `method@tau` rate column for every cell at
/// `nominal`.
pub fn power_to_wide_csv(sweep: &Sweep, points: &[PowerPoint], nominal: f64) -> Result<String> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty power curve".into()))?;
    let columns: Vec<(f64, Method)> = first
        .report
        .cells
        .iter()
        .filter(|c| c.nominal == nominal)
        .map(|c| (c.tau, c.method))
        .collect();
    if columns.is_empty() {
        return Err(Error::InvalidArgument(format!("nominal level {nominal} was not simulated")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["sweep", "sweep_value", "nominal", "reps", "n", "a", "b", "phi"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(columns.iter().map(|(tau, m)| format!("{}@{tau}", m.label())));
    w.write_record(&header)?;
    for p in points {
        let r = &p.report;
        let mut row = vec![
            sweep.name().to_string(),
            p.sweep_value.to_string(),
            nominal.to_string(),
            r.replications.to_string(),
            r.n.to_string(),
            r.a.to_string(),
            r.b.to_string(),
            r.phi.to_string(),
        ];
        for &(tau, m) in &columns {
            row.push(r.rate(tau, nominal, m).unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&row)?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}
