//! Density-weighted first stage: weighted least squares of the endogenous
//! variable on `w = (x, z)`, its sandwich covariance, the Wald test for
//! instrument relevance and sample Jacobian diagnostics.
//!
//! Unit weights give the ordinary 2SLS first stage through the same code.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats::linalg::{dot, factor_normal_matrix, symmetric_eigen, weighted_cross, weighted_gram, Matrix};
use crate::stats::{chisq_sf, solve_wls};
use crate::weights::WeightVector;

pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// `Omega_f^{-1} Omega_fsigma Omega_f^{-1}` with no small-sample correction.
    #[default]
    Hc0,
    /// HC0 times `n / (n - k - p)`.
    Hc1,
    /// `s^2 (W'VW)^{-1}` with `s^2 = sum f e^2 / (n - k - p)`; homoskedastic.
    Classical,
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hc0" => Ok(CovarianceKind::Hc0),
            "hc1" => Ok(CovarianceKind::Hc1),
            "classical" | "iid" => Ok(CovarianceKind::Classical),
            other => Err(Error::InvalidArgument(format!("unknown covariance kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStageResult {
    pub tau: Option<f64>,
    pub endogenous: String,
    /// Labels of `w = (x, z)`.
    pub names: Vec<String>,
    pub k: usize,
    pub p: usize,
    pub mu_hat: Vec<f64>,
    /// Estimated covariance of `mu_hat`, i.e. `V / n`.
    pub cov: Matrix,
    pub cov_kind: CovarianceKind,
    pub residuals: Vec<f64>,
    pub weights_used: WeightVector,
}

impl FirstStageResult {
    pub fn n(&self) -> usize {
        self.residuals.len()
    }

    /// Coefficients on the exogenous regressors.
    pub fn psi_hat(&self) -> &[f64] {
        &self.mu_hat[..self.k]
    }

    /// Coefficients on the instruments.
    pub fn delta_hat(&self) -> &[f64] {
        &self.mu_hat[self.k..]
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.cov.diag().into_iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn is_unit_weighted(&self) -> bool {
        self.weights_used.source == crate::weights::WeightSource::Unit
    }
}

pub fn fit_first_stage(data: &Dataset, weights: &WeightVector) -> Result<FirstStageResult> {
    fit_first_stage_with(data, weights, CovarianceKind::Hc0)
}

/// `mu = (W'VW)^{-1} W'VD` for the single endogenous column of `data`.
pub fn fit_first_stage_with(data: &Dataset, weights: &WeightVector, kind: CovarianceKind) -> Result<FirstStageResult> {
    let d = data.endogenous()?;
    if weights.len() != data.n() {
        return Err(Error::Dimension(format!(
            "{} weights for {} observations",
            weights.len(),
            data.n()
        )));
    }
    let w = data.w();
    let names = data.w_names();
    let mu = crate::stats::linalg::solve_wls_named(&w, &weights.values, &d, &names)?;
    let residuals: Vec<f64> = (0..data.n()).map(|i| d[i] - dot(w.row(i), &mu)).collect();
    let mut out = FirstStageResult {
        tau: weights.tau,
        endogenous: data.names().endogenous[0].clone(),
        names,
        k: data.k(),
        p: data.p(),
        mu_hat: mu,
        cov: Matrix::zeros(0, 0),
        cov_kind: kind,
        residuals,
        weights_used: weights.clone(),
    };
    out.cov = covariance(&w, &out, kind)?;
    Ok(out)
}

/// One first stage per endogenous column.
pub fn fit_first_stage_each(data: &Dataset, weights: &[WeightVector]) -> Result<Vec<FirstStageResult>> {
    if weights.len() != data.r() {
        return Err(Error::Dimension(format!(
            "{} weight vectors for {} endogenous columns",
            weights.len(),
            data.r()
        )));
    }
    (0..data.r())
        .map(|j| fit_first_stage(&data.select_endogenous(j)?, &weights[j]))
        .collect()
}

/// Recomputes the covariance of an existing fit under `kind`.
pub fn sandwich_cov(data: &Dataset, result: &FirstStageResult, kind: CovarianceKind) -> Result<Matrix> {
    covariance(&data.w(), result, kind)
}

fn covariance(w: &Matrix, result: &FirstStageResult, kind: CovarianceKind) -> Result<Matrix> {
    let n = w.nrows();
    let q = w.ncols();
    let nf = n as f64;
    let f = &result.weights_used.values;
    let e = &result.residuals;
    let omega_f = weighted_gram(w, f).scale(1.0 / nf);
    let chol = factor_normal_matrix(&omega_f, &result.names)?;
    let inv = chol.inverse();
    let v = match kind {
        CovarianceKind::Hc0 | CovarianceKind::Hc1 => {
            let fs2: Vec<f64> = (0..n).map(|i| (f[i] * e[i]).powi(2)).collect();
            let omega_fs = weighted_gram(w, &fs2).scale(1.0 / nf);
            let mut v = inv.matmul(&omega_fs)?.matmul(&inv)?.scale(1.0 / nf);
            if kind == CovarianceKind::Hc1 {
                v = v.scale(nf / dof_denominator(n, q)?);
            }
            v
        }
        CovarianceKind::Classical => {
            let s2 = (0..n).map(|i| f[i] * e[i] * e[i]).sum::<f64>() / dof_denominator(n, q)?;
            inv.scale(s2 / nf)
        }
    };
    Ok(symmetrized(v))
}

fn dof_denominator(n: usize, q: usize) -> Result<f64> {
    if n <= q {
        return Err(Error::Dimension(format!(
            "degrees-of-freedom correction needs n > {q}, got n = {n}"
        )));
    }
    Ok((n - q) as f64)
}

fn symmetrized(mut m: Matrix) -> Matrix {
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Positions within `delta_hat`.
    pub tested_indices: Vec<usize>,
}

/// `T = (R mu)' (R cov R')^{-1} (R mu)` against chi-square with
/// `|tested|` degrees of freedom.
///
/// At least one instrument must stay untested: weights estimated under the
/// null rely on it for identification.
pub fn wald_test(result: &FirstStageResult, tested: &[usize]) -> Result<WaldTest> {
    if tested.len() >= result.p {
        return Err(Error::OverIdentification { p: result.p });
    }
    wald_test_unchecked(result, tested)
}

/// [`wald_test`] without the over-identification guard, for designs where
/// the weights do not come from the tested instruments' null model.
pub fn wald_test_unchecked(result: &FirstStageResult, tested: &[usize]) -> Result<WaldTest> {
    if tested.is_empty() {
        return Err(Error::InvalidArgument("no instruments selected for testing".into()));
    }
    let mut seen = tested.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != tested.len() || tested.iter().any(|&j| j >= result.p) {
        return Err(Error::InvalidArgument(format!(
            "tested indices {tested:?} must be distinct and below {}",
            result.p
        )));
    }
    let idx: Vec<usize> = tested.iter().map(|&j| result.k + j).collect();
    let r_mu: Vec<f64> = idx.iter().map(|&j| result.mu_hat[j]).collect();
    let m = idx.len();
    let mut sub = Matrix::zeros(m, m);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            sub[(a, b)] = result.cov[(i, j)];
        }
    }
    let labels: Vec<String> = idx.iter().map(|&j| result.names[j].clone()).collect();
    let chol = factor_normal_matrix(&sub, &labels)
        .map_err(|e| Error::Singular(format!("restricted covariance of the tested coefficients: {e}")))?;
    let statistic = dot(&r_mu, &chol.solve(&r_mu)).max(0.0);
    Ok(WaldTest {
        statistic,
        dof: m,
        p_value: chisq_sf(statistic, m)?,
        tested_indices: tested.to_vec(),
    })
}

/// `***`, `**`, `*` at the 1%, 5% and 10% levels.
pub fn significance_stars(p_value: f64) -> &'static str {
    if p_value < 0.01 {
        "***"
    } else if p_value < 0.05 {
        "**"
    } else if p_value < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Two-stage least squares structural equation `y = d alpha + x beta + e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSlsFit {
    /// Endogenous label followed by the exogenous labels.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub cov: Matrix,
    pub cov_kind: CovarianceKind,
}

impl TwoSlsFit {
    pub fn std_errors(&self) -> Vec<f64> {
        self.cov.diag().into_iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Regresses `y` on `(d_hat, x)` where `d_hat` is the OLS first-stage fit.
/// Residuals for the covariance use the observed `d`.
pub fn two_stage_least_squares(data: &Dataset, kind: CovarianceKind) -> Result<TwoSlsFit> {
    let first = fit_first_stage_with(data, &WeightVector::unit(data.n()), kind)?;
    let d = data.endogenous()?;
    let n = data.n();
    let d_hat: Vec<f64> = (0..n).map(|i| d[i] - first.residuals[i]).collect();
    let x = data.x();
    let fitted = Matrix::hstack(&[&Matrix::from_columns(&[d_hat])?, x])?;
    let observed = Matrix::hstack(&[&Matrix::from_columns(&[d])?, x])?;
    let mut names = vec![first.endogenous.clone()];
    names.extend(data.names().exogenous.iter().cloned());
    let ones = vec![1.0; n];
    let gram = weighted_gram(&fitted, &ones);
    let chol = factor_normal_matrix(&gram, &names)?;
    let coef = chol.solve(&weighted_cross(&fitted, &ones, data.y()));
    let e: Vec<f64> = (0..n).map(|i| data.y()[i] - dot(observed.row(i), &coef)).collect();
    let inv = chol.inverse();
    let q = fitted.ncols();
    let cov = match kind {
        CovarianceKind::Hc0 | CovarianceKind::Hc1 => {
            let e2: Vec<f64> = e.iter().map(|v| v * v).collect();
            let meat = weighted_gram(&fitted, &e2);
            let v = inv.matmul(&meat)?.matmul(&inv)?;
            if kind == CovarianceKind::Hc1 {
                v.scale(n as f64 / dof_denominator(n, q)?)
            } else {
                v
            }
        }
        CovarianceKind::Classical => inv.scale(e.iter().map(|v| v * v).sum::<f64>() / dof_denominator(n, q)?),
    };
    Ok(TwoSlsFit {
        names,
        coefficients: coef,
        cov: symmetrized(cov),
        cov_kind: kind,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianDiagnostics {
    /// `(1/n) sum f_i z_i d_i`, a `p x 1` matrix.
    pub fzd: Matrix,
    /// `(1/n) sum f_i z_i z_i'`.
    pub fzz: Matrix,
    pub rank_fzd: usize,
    pub rank_fzz: usize,
    /// `fzd` has a column that is numerically nonzero.
    pub fzd_nonzero: bool,
    /// `max |fzd - fzz delta|`, reported only when `x` is empty and `fzz`
    /// has full rank.
    pub identity_residual: Option<f64>,
}

pub fn jacobian_diagnostics(data: &Dataset, weights: &WeightVector) -> Result<JacobianDiagnostics> {
    let d = data.endogenous()?;
    if weights.len() != data.n() {
        return Err(Error::Dimension("weights and data differ in length".into()));
    }
    let nf = data.n() as f64;
    let f = &weights.values;
    let z = data.z();
    let fzd_v: Vec<f64> = weighted_cross(z, f, &d).into_iter().map(|v| v / nf).collect();
    let fzz = weighted_gram(z, f).scale(1.0 / nf);
    let fdd = (0..data.n()).map(|i| f[i] * d[i] * d[i]).sum::<f64>() / nf;

    let (eig, _) = symmetric_eigen(&fzz);
    let top = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rank_fzz = eig.iter().filter(|v| v.abs() > RANK_TOLERANCE * top).count();
    // Cauchy-Schwarz bounds |fzd_j| by sqrt(fzz_jj fdd); compare against that.
    let scale = (0..data.p()).fold(0.0f64, |m, j| m.max((fzz[(j, j)] * fdd).sqrt()));
    let norm = fzd_v.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fzd_nonzero = scale > 0.0 && norm > RANK_TOLERANCE * scale;

    // the identity needs the WLS solution, which exists only at full rank
    let identity_residual = if data.k() == 0 && rank_fzz == data.p() {
        let delta = solve_wls(z, f, &d)?;
        let implied = fzz.matvec(&delta);
        Some(
            fzd_v
                .iter()
                .zip(&implied)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
        )
    } else {
        None
    };
    Ok(JacobianDiagnostics {
        fzd: Matrix::from_columns(&[fzd_v])?,
        fzz,
        rank_fzd: fzd_nonzero as usize,
        rank_fzz,
        fzd_nonzero,
        identity_residual,
    })
}
