//! Oracles shared by several test targets.
#![allow(dead_code)]

use ivqr_core::qr::check_loss;
use ivqr_core::stats::linalg::lu_inverse;
use ivqr_core::stats::{chisq_cdf, Matrix, RngStream};
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

/// Minimum mean check loss over every exact fit through `q` observations.
/// Some optimal solution of the LP is always basic, so this is the optimum.
pub fn brute_force_objective(y: &[f64], x: &Matrix, tau: f64) -> f64 {
    let n = x.nrows();
    let q = x.ncols();
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..q).collect();
    loop {
        let xb = x.select_rows(&idx);
        if let Ok(inv) = lu_inverse(&xb) {
            let yb: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let b = inv.matvec(&yb);
            let obj: f64 = (0..n)
                .map(|i| {
                    let fit: f64 = x.row(i).iter().zip(&b).map(|(a, c)| a * c).sum();
                    check_loss(y[i] - fit, tau)
                })
                .sum::<f64>()
                / n as f64;
            best = best.min(obj);
        }
        // next combination
        let mut k = q;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] != k + n - q {
                break;
            }
            if k == 0 {
                return best;
            }
        }
        idx[k] += 1;
        for j in k + 1..q {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Intercept plus `q - 1` Gaussian columns; `y` is their sum plus noise.
pub fn random_qr_instance(seed: u64, n: usize, q: usize) -> (Vec<f64>, Matrix) {
    let mut rng = RngStream::new(seed, 99);
    let mut cols = vec![vec![1.0; n]];
    for _ in 1..q {
        cols.push((0..n).map(|_| rng.standard_normal()).collect());
    }
    let x = Matrix::from_columns(&cols).unwrap();
    let y = (0..n)
        .map(|i| x.row(i).iter().sum::<f64>() + 2.0 * rng.standard_normal())
        .collect();
    (y, x)
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).expect("finite")
}

// Gauss-Jordan elimination over the rationals.
fn exact_solve(mut a: Vec<Vec<BigRational>>, mut b: Vec<BigRational>) -> Vec<BigRational> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero()).expect("nonsingular");
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let factor = &a[r][col] / &a[col][col];
                for c in col..n {
                    let t = &factor * &a[col][c];
                    a[r][c] -= t;
                }
                let t = &factor * &b[col];
                b[r] -= t;
            }
        }
    }
    (0..n).map(|i| &b[i] / &a[i][i]).collect()
}

/// Weighted least squares of `d` on `w`, with the normal equations formed
/// and solved in exact rational arithmetic.
pub fn exact_wls(w: &Matrix, f: &[f64], d: &[f64]) -> Vec<f64> {
    let q = w.ncols();
    let mut a = vec![vec![BigRational::zero(); q]; q];
    let mut b = vec![BigRational::zero(); q];
    for i in 0..w.nrows() {
        let fi = exact(f[i]);
        for r in 0..q {
            let fw = &fi * exact(w[(i, r)]);
            b[r] += &fw * exact(d[i]);
            for c in 0..q {
                a[r][c] += &fw * exact(w[(i, c)]);
            }
        }
    }
    exact_solve(a, b).iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Kolmogorov-Smirnov distance against the chi-square(1) CDF.
pub fn ks_chi_square_1(mut t: Vec<f64>) -> f64 {
    t.sort_by(f64::total_cmp);
    let n = t.len() as f64;
    t.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = chisq_cdf(v, 1).unwrap();
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}

/// 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}
