//! Linear quantile regression: `argmin_b sum_i rho_tau(y_i - x_i b)`.
//!
//! Cold starts run a primal-dual interior point method on the bounded LP
//! dual of the check-loss problem (Frisch-Newton with Mehrotra
//! predictor-corrector steps). The interior solution is then pushed to an
//! exact basic solution by simplex-style edge descent: `q` observations are
//! interpolated exactly and every edge leaving the vertex is non-improving.
//!
//! Edge descent doubles as a warm-start solver. Callers that solve a
//! sequence of nearby problems (the IVQR grid over alpha) pass the previous
//! optimal basis to [`fit_qr_from_basis`] and usually reach the new optimum
//! in a handful of pivots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::linalg::{dot, equilibrated_rcond, lu_inverse, weighted_gram, Cholesky, Matrix, RCOND_THRESHOLD};

/// Duality-gap tolerance of the interior point phase, relative to `1 + sum rho`.
pub const GAP_TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 200;

const STEP_FRACTION: f64 = 0.9995;

/// `u (tau - 1{u < 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Mean check loss of the residuals `y - X b`.
pub fn mean_check_loss(y: &[f64], x: &Matrix, b: &[f64], tau: f64) -> f64 {
    let n = y.len();
    (0..n).map(|i| check_loss(y[i] - dot(x.row(i), b), tau)).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau: f64,
    pub coefficients: Vec<f64>,
    /// Mean check loss at `coefficients`.
    pub objective: f64,
    /// Interior point iterations plus simplex pivots.
    pub iterations: usize,
    pub converged: bool,
    /// Observations interpolated exactly by the returned basic solution.
    pub basis: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct QrOptions {
    pub gap_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QrOptions {
    fn default() -> Self {
        Self {
            gap_tolerance: GAP_TOLERANCE,
            max_iterations: MAX_ITERATIONS,
        }
    }
}

fn check_inputs(y: &[f64], x: &Matrix, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {tau}")));
    }
    if y.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} responses for a design with {} rows",
            y.len(),
            x.nrows()
        )));
    }
    if x.nrows() <= x.ncols() {
        return Err(Error::Dimension(format!(
            "quantile regression needs n > q, got n = {} and q = {}",
            x.nrows(),
            x.ncols()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite response".into()));
    }
    Ok(())
}

fn check_rank(x: &Matrix) -> Result<()> {
    let gram = weighted_gram(x, &vec![1.0; x.nrows()]);
    let (rcond, offenders) = equilibrated_rcond(&gram);
    if rcond < RCOND_THRESHOLD {
        return Err(Error::RankDeficient {
            rcond,
            columns: offenders.into_iter().map(|j| format!("column {j}")).collect(),
        });
    }
    Ok(())
}

pub fn fit_qr(y: &[f64], x: &Matrix, tau: f64) -> Result<QuantileFit> {
    fit_qr_with(y, x, tau, &QrOptions::default())
}

pub fn fit_qr_with(y: &[f64], x: &Matrix, tau: f64, opts: &QrOptions) -> Result<QuantileFit> {
    check_inputs(y, x, tau)?;
    check_rank(x)?;
    let ip = interior_point(y, x, tau, opts);
    let basis = initial_basis(x, &ip.residuals).ok_or_else(|| Error::RankDeficient {
        rcond: 0.0,
        columns: Vec::new(),
    })?;
    match edge_descent(y, x, tau, basis, opts.max_iterations.max(10 * x.nrows())) {
        Ok(v) => Ok(QuantileFit {
            tau,
            objective: mean_check_loss(y, x, &v.coefficients, tau),
            coefficients: v.coefficients,
            iterations: ip.iterations + v.pivots,
            converged: true,
            basis: v.basis,
        }),
        Err(_) if ip.converged => Ok(QuantileFit {
            tau,
            objective: mean_check_loss(y, x, &ip.coefficients, tau),
            coefficients: ip.coefficients,
            iterations: ip.iterations,
            converged: true,
            basis: Vec::new(),
        }),
        Err(_) => Err(Error::NotConverged {
            iterations: ip.iterations,
            gap: ip.gap,
            best: ip.coefficients,
        }),
    }
}

/// Solves from a known basis (typically the optimum of a nearby problem).
/// Falls back to a cold start when the basis is unusable for this design.
pub fn fit_qr_from_basis(y: &[f64], x: &Matrix, tau: f64, basis: &[usize]) -> Result<QuantileFit> {
    check_inputs(y, x, tau)?;
    if basis.len() == x.ncols() && basis.iter().all(|&i| i < x.nrows()) {
        if let Ok(v) = edge_descent(y, x, tau, basis.to_vec(), 10 * x.nrows().max(MAX_ITERATIONS)) {
            return Ok(QuantileFit {
                tau,
                objective: mean_check_loss(y, x, &v.coefficients, tau),
                coefficients: v.coefficients,
                iterations: v.pivots,
                converged: true,
                basis: v.basis,
            });
        }
    }
    fit_qr(y, x, tau)
}

struct InteriorPoint {
    coefficients: Vec<f64>,
    residuals: Vec<f64>,
    iterations: usize,
    gap: f64,
    converged: bool,
}

/// Frisch-Newton interior point on
/// `max y'a  s.t.  X'a = (1 - tau) X'1,  0 <= a <= 1`,
/// written as the primal `min c'x, Ax = b, 0 <= x <= 1` with `A = X'`,
/// `c = -y`. The coefficients are minus the equality multipliers.
fn interior_point(y: &[f64], xm: &Matrix, tau: f64, opts: &QrOptions) -> InteriorPoint {
    let n = xm.nrows();
    let q = xm.ncols();
    let c: Vec<f64> = y.iter().map(|v| -v).collect();

    let mut x = vec![1.0 - tau; n];
    let mut s = vec![tau; n];

    // least-squares start for the multipliers
    let gram = weighted_gram(xm, &vec![1.0; n]);
    let Ok(chol) = Cholesky::new(&gram) else {
        return InteriorPoint {
            coefficients: vec![0.0; q],
            residuals: y.to_vec(),
            iterations: 0,
            gap: f64::INFINITY,
            converged: false,
        };
    };
    let xtc: Vec<f64> = (0..q).map(|j| (0..n).map(|i| xm[(i, j)] * c[i]).sum()).collect();
    let mut ydual = chol.solve(&xtc);
    let r: Vec<f64> = (0..n).map(|i| c[i] - dot(xm.row(i), &ydual)).collect();
    let margin = (r.iter().map(|v| v.abs()).sum::<f64>() / n as f64 * 1e-2).max(1e-10);
    let mut z: Vec<f64> = r.iter().map(|v| v.max(0.0) + margin).collect();
    let mut w: Vec<f64> = r.iter().map(|v| (-v).max(0.0) + margin).collect();

    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut qdiag = vec![0.0; n];
    let mut rr = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut dz = vec![0.0; n];
    let mut dw = vec![0.0; n];

    while iterations < opts.max_iterations {
        gap = dot(&x, &z) + dot(&s, &w);
        let coef: Vec<f64> = ydual.iter().map(|v| -v).collect();
        let primal_sum: f64 = (0..n).map(|i| check_loss(y[i] - dot(xm.row(i), &coef), tau)).sum();
        if gap <= opts.gap_tolerance * (1.0 + primal_sum.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        for i in 0..n {
            qdiag[i] = 1.0 / (z[i] / x[i] + w[i] / s[i]);
        }
        let normal = weighted_gram(xm, &qdiag);
        let Ok(chol) = Cholesky::new(&normal) else {
            break;
        };

        // Newton direction for complementarity targets (rxz, rsw); primal
        // and dual feasibility hold exactly and are preserved.
        let solve_direction = |rxz: &[f64], rsw: &[f64], rr: &mut [f64], dx: &mut [f64], dz: &mut [f64], dw: &mut [f64]| {
            for i in 0..n {
                rr[i] = rxz[i] / x[i] - rsw[i] / s[i];
            }
            let mut rhs = vec![0.0; q];
            for i in 0..n {
                let f = qdiag[i] * rr[i];
                for (r, xv) in rhs.iter_mut().zip(xm.row(i)) {
                    *r -= f * xv;
                }
            }
            let dy = chol.solve(&rhs);
            for i in 0..n {
                dx[i] = qdiag[i] * (dot(xm.row(i), &dy) + rr[i]);
                dz[i] = (rxz[i] - z[i] * dx[i]) / x[i];
                dw[i] = (rsw[i] + w[i] * dx[i]) / s[i];
            }
            dy
        };

        let rxz: Vec<f64> = (0..n).map(|i| -x[i] * z[i]).collect();
        let rsw: Vec<f64> = (0..n).map(|i| -s[i] * w[i]).collect();
        let _ = solve_direction(&rxz, &rsw, &mut rr, &mut dx, &mut dz, &mut dw);
        let (ap, ad) = step_lengths(&x, &s, &z, &w, &dx, &dz, &dw);

        let mu_aff: f64 = (0..n)
            .map(|i| (x[i] + ap * dx[i]) * (z[i] + ad * dz[i]) + (s[i] - ap * dx[i]) * (w[i] + ad * dw[i]))
            .sum();
        let sigma = (mu_aff / gap).clamp(0.0, 1.0).powi(3);
        let mu = sigma * gap / (2 * n) as f64;

        let rxz: Vec<f64> = (0..n).map(|i| -x[i] * z[i] - dx[i] * dz[i] + mu).collect();
        let rsw: Vec<f64> = (0..n).map(|i| -s[i] * w[i] + dx[i] * dw[i] + mu).collect();
        let dy = solve_direction(&rxz, &rsw, &mut rr, &mut dx, &mut dz, &mut dw);
        let (ap, ad) = step_lengths(&x, &s, &z, &w, &dx, &dz, &dw);

        for i in 0..n {
            x[i] += ap * dx[i];
            s[i] -= ap * dx[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        for (yd, d) in ydual.iter_mut().zip(&dy) {
            *yd += ad * d;
        }
        if ap < 1e-12 && ad < 1e-12 {
            break;
        }
    }

    let coefficients: Vec<f64> = ydual.iter().map(|v| -v).collect();
    let residuals = (0..n).map(|i| y[i] - dot(xm.row(i), &coefficients)).collect();
    InteriorPoint {
        coefficients,
        residuals,
        iterations,
        gap,
        converged,
    }
}

fn step_lengths(x: &[f64], s: &[f64], z: &[f64], w: &[f64], dx: &[f64], dz: &[f64], dw: &[f64]) -> (f64, f64) {
    let mut ap = f64::INFINITY;
    let mut ad = f64::INFINITY;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            ap = ap.min(-x[i] / dx[i]);
        }
        if dx[i] > 0.0 {
            ap = ap.min(s[i] / dx[i]);
        }
        if dz[i] < 0.0 {
            ad = ad.min(-z[i] / dz[i]);
        }
        if dw[i] < 0.0 {
            ad = ad.min(-w[i] / dw[i]);
        }
    }
    ((STEP_FRACTION * ap).min(1.0), (STEP_FRACTION * ad).min(1.0))
}

/// Picks `q` linearly independent rows, preferring the smallest residuals.
fn initial_basis(x: &Matrix, residuals: &[f64]) -> Option<Vec<usize>> {
    let n = x.nrows();
    let q = x.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| residuals[a].abs().total_cmp(&residuals[b].abs()).then(a.cmp(&b)));

    // incremental modified Gram-Schmidt on the chosen rows
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut basis = Vec::with_capacity(q);
    for &i in &order {
        let row = x.row(i);
        let norm0 = dot(row, row).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for u in &ortho {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            ortho.push(v);
            basis.push(i);
            if basis.len() == q {
                return Some(basis);
            }
        }
    }
    None
}

struct Vertex {
    coefficients: Vec<f64>,
    basis: Vec<usize>,
    pivots: usize,
}

/// Exact simplex descent over basic solutions of the check-loss problem.
///
/// At a vertex with basis `h`, the `2q` edges free one basic residual in
/// either direction. An edge is followed while its directional derivative is
/// negative; the line search stops at the breakpoint where the slope turns
/// nonnegative, and that observation enters the basis.
fn edge_descent(y: &[f64], x: &Matrix, tau: f64, mut basis: Vec<usize>, max_pivots: usize) -> Result<Vertex> {
    let n = x.nrows();
    let q = x.ncols();
    let yscale = 1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let zero_tol = 1e-11 * yscale;
    let opt_tol = 1e-10;

    let mut in_basis = vec![false; n];
    let mut pivots = 0;
    let mut a = vec![0.0; n];
    let mut breaks: Vec<(f64, usize)> = Vec::with_capacity(n);

    loop {
        in_basis.iter_mut().for_each(|v| *v = false);
        for &i in &basis {
            in_basis[i] = true;
        }
        let xb = x.select_rows(&basis);
        let binv = lu_inverse(&xb)?;
        let yb: Vec<f64> = basis.iter().map(|&i| y[i]).collect();
        let coef = binv.matvec(&yb);
        let mut resid: Vec<f64> = (0..n).map(|i| y[i] - dot(x.row(i), &coef)).collect();
        for &i in &basis {
            resid[i] = 0.0;
        }

        // gradient from nonzero nonbasic residuals; exact zeros kept aside
        let mut g = vec![0.0; q];
        let mut ties = Vec::new();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            if resid[i].abs() <= zero_tol {
                ties.push(i);
                continue;
            }
            let psi = if resid[i] < 0.0 { tau - 1.0 } else { tau };
            for (gv, xv) in g.iter_mut().zip(x.row(i)) {
                *gv += psi * xv;
            }
        }
        // lambda = g B^{-1}
        let lambda: Vec<f64> = (0..q).map(|j| (0..q).map(|l| g[l] * binv[(l, j)]).sum()).collect();
        // row i of X B^{-1}, needed only for tied observations
        let tie_rows: Vec<Vec<f64>> = ties
            .iter()
            .map(|&i| (0..q).map(|j| (0..q).map(|l| x[(i, l)] * binv[(l, j)]).sum()).collect())
            .collect();

        let mut best: Option<(f64, usize, f64)> = None;
        for j in 0..q {
            for sgn in [1.0, -1.0] {
                let mut deriv = -sgn * lambda[j] + if sgn > 0.0 { 1.0 - tau } else { tau };
                for row in &tie_rows {
                    let aij = sgn * row[j];
                    deriv += if aij > 0.0 { (1.0 - tau) * aij } else { -tau * aij };
                }
                if deriv < -opt_tol && best.is_none_or(|(d, _, _)| deriv < d) {
                    best = Some((deriv, j, sgn));
                }
            }
        }
        let Some((deriv, leave, sgn)) = best else {
            return Ok(Vertex {
                coefficients: coef,
                basis,
                pivots,
            });
        };
        if pivots >= max_pivots {
            return Err(Error::NotConverged {
                iterations: pivots,
                gap: -deriv,
                best: coef,
            });
        }
        pivots += 1;

        // a_i = x_i . delta with delta = sgn * B^{-1} e_leave
        let dir: Vec<f64> = (0..q).map(|l| sgn * binv[(l, leave)]).collect();
        breaks.clear();
        for i in 0..n {
            a[i] = dot(x.row(i), &dir);
            if in_basis[i] || resid[i].abs() <= zero_tol || a[i] == 0.0 {
                continue;
            }
            let t = resid[i] / a[i];
            if t > 0.0 {
                breaks.push((t, i));
            }
        }
        breaks.sort_by(|p, r| p.0.total_cmp(&r.0).then(p.1.cmp(&r.1)));
        let mut slope = deriv;
        let mut enter = None;
        for &(_, i) in &breaks {
            slope += a[i].abs();
            if slope >= -opt_tol {
                enter = Some(i);
                break;
            }
        }
        let Some(enter) = enter else {
            return Err(Error::Singular("check-loss objective unbounded along an edge".into()));
        };
        basis[leave] = enter;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept(n: usize) -> Matrix {
        Matrix::from_vec(n, 1, vec![1.0; n]).unwrap()
    }

    #[test]
    fn check_loss_definition() {
        assert_eq!(check_loss(0.0, 0.5), 0.0);
        assert!((check_loss(-2.0, 0.25) - 1.5).abs() < 1e-15);
        assert!((check_loss(3.0, 0.25) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sample_quantiles() {
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let fit = fit_qr(&y, &intercept(5), 0.5).unwrap();
        assert!((fit.coefficients[0] - 3.0).abs() < 1e-10);
        let fit = fit_qr(&y, &intercept(5), 0.25).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-10);
        assert!(fit.converged);
    }

    #[test]
    fn rejects_bad_tau_and_rank() {
        let y = [1.0, 2.0, 3.0];
        assert!(matches!(fit_qr(&y, &intercept(3), 0.0), Err(Error::Domain(_))));
        assert!(matches!(fit_qr(&y, &intercept(3), 1.0), Err(Error::Domain(_))));
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(matches!(fit_qr(&y, &x, 0.5), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn exact_fit_is_recovered() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.37).collect();
        let x = Matrix::from_columns(&[vec![1.0; 20], xs.clone()]).unwrap();
        let y: Vec<f64> = xs.iter().map(|v| 1.5 - 2.0 * v).collect();
        for tau in [0.1, 0.5, 0.9] {
            let fit = fit_qr(&y, &x, tau).unwrap();
            assert!((fit.coefficients[0] - 1.5).abs() < 1e-9);
            assert!((fit.coefficients[1] + 2.0).abs() < 1e-9);
            assert!(fit.objective < 1e-10);
        }
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|i| ((i * 37) % 17) as f64 / 4.0).collect();
        let noise: Vec<f64> = (0..n).map(|i| (((i * 7919) % 101) as f64 - 50.0) / 25.0).collect();
        let x = Matrix::from_columns(&[vec![1.0; n], xs.clone()]).unwrap();
        let y: Vec<f64> = (0..n).map(|i| 0.5 + xs[i] + noise[i]).collect();
        let cold = fit_qr(&y, &x, 0.3).unwrap();
        let y2: Vec<f64> = (0..n).map(|i| y[i] - 0.05 * xs[i]).collect();
        let warm = fit_qr_from_basis(&y2, &x, 0.3, &cold.basis).unwrap();
        let cold2 = fit_qr(&y2, &x, 0.3).unwrap();
        assert!((warm.objective - cold2.objective).abs() < 1e-12);
    }
}
