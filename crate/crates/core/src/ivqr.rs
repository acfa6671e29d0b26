//! Inverse quantile regression: for each candidate `alpha` on a grid, fit
//! the quantile regression of `y - d alpha` on `(x, z)` and keep the `alpha`
//! that drives the instrument coefficients `gamma(alpha)` closest to zero in
//! the `A`-norm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::qr::{fit_qr, fit_qr_from_basis, QuantileFit};
use crate::stats::linalg::{dot, lu_inverse, weighted_gram, Cholesky, Matrix};
use crate::stats::{norm_pdf, norm_quantile};

pub const MAX_GRID_POINTS: usize = 100_000;
const FLAT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    lo: f64,
    hi: f64,
    step: f64,
}

impl AlphaGrid {
    pub fn new(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
            return Err(Error::InvalidArgument("grid bounds must be finite".into()));
        }
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("grid needs lo < hi, got {lo} and {hi}")));
        }
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!("grid step must be positive, got {step}")));
        }
        if (hi - lo) / step > MAX_GRID_POINTS as f64 {
            return Err(Error::InvalidArgument(format!(
                "grid has more than {MAX_GRID_POINTS} points"
            )));
        }
        Ok(Self { lo, hi, step })
    }

    /// `[-1, 3]` in steps of 0.02, wide enough around the simulation truth of 1.
    pub fn simulation_default() -> Self {
        Self {
            lo: -1.0,
            hi: 3.0,
            step: 0.02,
        }
    }

    /// `{0, 0.004, ..., 1}`, the returns-to-schooling grid.
    pub fn card_default() -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            step: 0.004,
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// `lo + i step` for `i = 0..=m`, with `hi` included when it lies on the
    /// lattice up to rounding.
    pub fn points(&self) -> Vec<f64> {
        let span = (self.hi - self.lo) / self.step;
        let m = if (span - span.round()).abs() < 1e-9 {
            span.round() as usize
        } else {
            span.floor() as usize
        };
        (0..=m).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

impl FromStr for AlphaGrid {
    type Err = Error;

    /// Parses `lo:step:hi`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!("grid must look like lo:step:hi, got `{s}`")));
        }
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number `{t}` in grid `{s}`")))
        };
        AlphaGrid::new(num(parts[0])?, num(parts[2])?, num(parts[1])?)
    }
}

impl fmt::Display for AlphaGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.step, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    Identity,
    /// Inverse of the estimated covariance of `gamma(alpha)`, recomputed at
    /// every grid point.
    InverseGammaCov,
}

impl FromStr for WeightingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "id" => Ok(WeightingMode::Identity),
            "invcov" | "inverse_gamma_cov" => Ok(WeightingMode::InverseGammaCov),
            other => Err(Error::InvalidArgument(format!("unknown weighting mode `{other}`"))),
        }
    }
}

pub fn weighting_matrix(mode: WeightingMode, p: usize, gamma_cov: Option<&Matrix>) -> Result<Matrix> {
    match mode {
        WeightingMode::Identity => Ok(Matrix::identity(p)),
        WeightingMode::InverseGammaCov => {
            let cov = gamma_cov.ok_or_else(|| {
                Error::InvalidArgument("inverse covariance weighting needs a covariance matrix".into())
            })?;
            if cov.nrows() != p || cov.ncols() != p {
                return Err(Error::Dimension(format!(
                    "covariance is {}x{}, expected {p}x{p}",
                    cov.nrows(),
                    cov.ncols()
                )));
            }
            if !cov.is_symmetric(1e-10 * (1.0 + cov.max_abs())) {
                return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
            }
            let inv = Cholesky::new(cov)?.inverse();
            Ok(symmetrize(inv))
        }
    }
}

fn symmetrize(mut m: Matrix) -> Matrix {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IvqrWarning {
    /// The objective curve is flat: `gamma` does not respond to `alpha`.
    FlatObjective { range: f64 },
    /// The minimizer sits on the first or last grid point.
    Boundary { alpha: f64 },
    /// An adjacent-point jump larger than ten times the typical one.
    Discontinuity { alpha: f64, jump: f64 },
}

impl fmt::Display for IvqrWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IvqrWarning::FlatObjective { range } => write!(
                f,
                "objective curve is flat (range {range:.3e}); alpha is not identified by these instruments"
            ),
            IvqrWarning::Boundary { alpha } => {
                write!(f, "minimizer alpha = {alpha} lies on the grid boundary; widen the grid")
            }
            IvqrWarning::Discontinuity { alpha, jump } => {
                write!(f, "objective jumps by {jump:.3e} next to alpha = {alpha}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvqrFit {
    pub tau: f64,
    pub alpha_hat: f64,
    pub beta_hat: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    pub grid: Vec<f64>,
    pub objective_curve: Vec<f64>,
    /// Weighting matrix at the minimizer.
    #[serde(rename = "A")]
    pub a: Matrix,
    pub warnings: Vec<IvqrWarning>,
    /// Basis of the inner fit at the minimizer, reusable as a warm start.
    #[serde(skip)]
    pub basis: Vec<usize>,
}

impl IvqrFit {
    /// `theta = (alpha, beta', gamma')'`, aligned with `s = (d, x, z)`.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(1 + self.beta_hat.len() + self.gamma_hat.len());
        t.push(self.alpha_hat);
        t.extend_from_slice(&self.beta_hat);
        t.extend_from_slice(&self.gamma_hat);
        t
    }

    pub fn index_of_min(&self) -> usize {
        self.grid
            .iter()
            .position(|&a| a == self.alpha_hat)
            .unwrap_or(0)
    }
}

pub fn fit_ivqr(data: &Dataset, tau: f64, grid: &AlphaGrid, mode: WeightingMode) -> Result<IvqrFit> {
    fit_ivqr_warm(data, tau, grid, mode, None)
}

/// As [`fit_ivqr`], seeding the first inner fit with `start` (a basis from a
/// related fit on the same data).
pub fn fit_ivqr_warm(
    data: &Dataset,
    tau: f64,
    grid: &AlphaGrid,
    mode: WeightingMode,
    start: Option<&[usize]>,
) -> Result<IvqrFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {tau}")));
    }
    let d = data.endogenous()?;
    let w = data.w();
    let k = data.k();
    let p = data.p();
    let y = data.y();
    let alphas = grid.points();

    // (W'W)^{-1} restricted to the instrument block; fixed across the grid
    let gamma_block = match mode {
        WeightingMode::Identity => None,
        WeightingMode::InverseGammaCov => {
            let inv = lu_inverse(&weighted_gram(&w, &vec![1.0; w.nrows()]))?;
            Some(inv.block(k, k, p, p))
        }
    };
    let mut basis: Option<Vec<usize>> = start.map(|b| b.to_vec());
    let mut curve = Vec::with_capacity(alphas.len());
    let mut best: Option<(usize, QuantileFit, Matrix)> = None;
    let mut shifted = vec![0.0; y.len()];
    for (idx, &alpha) in alphas.iter().enumerate() {
        for i in 0..y.len() {
            shifted[i] = y[i] - d[i] * alpha;
        }
        let fit = match &basis {
            Some(b) => fit_qr_from_basis(&shifted, &w, tau, b)?,
            None => fit_qr(&shifted, &w, tau)?,
        };
        let gamma = &fit.coefficients[k..];
        let a = match mode {
            WeightingMode::Identity => Matrix::identity(p),
            WeightingMode::InverseGammaCov => {
                let zz = gamma_block.as_ref().expect("computed for this mode");
                let resid: Vec<f64> = (0..y.len()).map(|i| shifted[i] - dot(w.row(i), &fit.coefficients)).collect();
                let cov = zz.scale(iid_scale(&resid, w.ncols(), tau)?);
                weighting_matrix(mode, p, Some(&cov))?
            }
        };
        let value = dot(gamma, &a.matvec(gamma)).max(0.0);
        curve.push(value);
        // strict comparison keeps the smallest alpha among ties
        if best.as_ref().is_none_or(|(j, _, _)| value < curve[*j]) {
            best = Some((idx, fit.clone(), a));
        }
        if !fit.basis.is_empty() {
            basis = Some(fit.basis);
        }
    }
    let (imin, fit, a) = best.ok_or_else(|| Error::InvalidArgument("empty alpha grid".into()))?;

    let mut warnings = Vec::new();
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo < FLAT_TOLERANCE {
        warnings.push(IvqrWarning::FlatObjective { range: hi - lo });
    } else if imin == 0 || imin + 1 == alphas.len() {
        warnings.push(IvqrWarning::Boundary { alpha: alphas[imin] });
    }
    if let Some(w) = discontinuity(&alphas, &curve) {
        warnings.push(w);
    }
    for warning in &warnings {
        match warning {
            IvqrWarning::Discontinuity { .. } => log::debug!("tau {tau}: {warning}"),
            _ => log::warn!("tau {tau}: {warning}"),
        }
    }

    Ok(IvqrFit {
        tau,
        alpha_hat: alphas[imin],
        beta_hat: fit.coefficients[..k].to_vec(),
        gamma_hat: fit.coefficients[k..].to_vec(),
        grid: alphas,
        objective_curve: curve,
        a,
        warnings,
        basis: fit.basis,
    })
}

// Largest adjacent jump against ten times the median jump.
fn discontinuity(alphas: &[f64], curve: &[f64]) -> Option<IvqrWarning> {
    if curve.len() < 3 {
        return None;
    }
    let mut jumps: Vec<f64> = curve.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let (imax, &jmax) = jumps
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    jumps.sort_by(f64::total_cmp);
    let typical = jumps[jumps.len() / 2];
    (typical > 0.0 && jmax > 10.0 * typical).then(|| IvqrWarning::Discontinuity {
        alpha: alphas[imax],
        jump: jmax,
    })
}

/// Covariance of quantile regression coefficients under iid errors,
/// `s^2 tau (1 - tau) (X'X)^{-1}`.
///
/// The sparsity `s = 1/f(F^{-1}(tau))` is the median-regression slope of the
/// `h` residuals closest to zero (skipping exact zeros), sorted, against their
/// ranks over `n - q`; `h` is `n` times the Hall-Sheather bandwidth.
pub fn qr_iid_covariance(y: &[f64], x: &Matrix, fit: &QuantileFit) -> Result<Matrix> {
    let xtx = weighted_gram(x, &vec![1.0; x.nrows()]);
    let inv = lu_inverse(&xtx)?;
    let resid: Vec<f64> = (0..y.len()).map(|i| y[i] - dot(x.row(i), &fit.coefficients)).collect();
    Ok(inv.scale(iid_scale(&resid, x.ncols(), fit.tau)?))
}

// s^2 tau (1 - tau)
fn iid_scale(resid: &[f64], q: usize, tau: f64) -> Result<f64> {
    let s = residual_sparsity(resid, q, tau)?;
    Ok(s * s * tau * (1.0 - tau))
}

fn residual_sparsity(resid: &[f64], q: usize, tau: f64) -> Result<f64> {
    let n = resid.len();
    let big = resid.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let eps = 1e-9 * (1.0 + big);
    let zeros = resid.iter().filter(|r| r.abs() < eps).count();
    let h = ((n as f64 * hall_sheather_classic(tau, n)).ceil() as usize).max(q + 1);
    if zeros + h + 1 > n || n <= q {
        return Err(Error::Dimension(format!(
            "too few residuals ({n}) for a sparsity estimate with window {h}"
        )));
    }
    let mut by_abs = resid.to_vec();
    by_abs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // ranks zeros+1 ..= zeros+h+1, one-based
    let ranks: Vec<usize> = (zeros + 1..=zeros + h + 1).collect();
    let mut ordered: Vec<f64> = ranks.iter().map(|&r| by_abs[r - 1]).collect();
    ordered.sort_by(f64::total_cmp);
    let denom = (n - q) as f64;
    let design = Matrix::from_columns(&[
        vec![1.0; ranks.len()],
        ranks.iter().map(|&r| r as f64 / denom).collect(),
    ])?;
    let slope = fit_qr(&ordered, &design, 0.5)?.coefficients[1];
    if !(slope.is_finite() && slope > 0.0) {
        return Err(Error::Singular(format!("nonpositive sparsity estimate {slope}")));
    }
    Ok(slope)
}

/// The unscaled Hall-Sheather rule used for coefficient standard errors.
pub fn hall_sheather_classic(tau: f64, n: usize) -> f64 {
    let x0 = norm_quantile(tau).unwrap_or(0.0);
    let f0 = norm_pdf(x0);
    let za = norm_quantile(0.975).unwrap_or(1.959_963_984_540_054);
    (n as f64).powf(-1.0 / 3.0) * za.powf(2.0 / 3.0) * (1.5 * f0 * f0 / (2.0 * x0 * x0 + 1.0)).powf(1.0 / 3.0)
}
