//! Small dense linear algebra: a row-major matrix, Cholesky factorization,
//! a cyclic Jacobi eigensolver and the weighted least-squares kernel.
//!
//! The designs handled here are narrow (tens of columns at most), so the WLS
//! solve goes through the normal equations with a Cholesky factor instead of
//! an orthogonal decomposition. That squares the condition number of the
//! design; the equilibrated reciprocal-condition check in [`solve_wls`]
//! rejects problems where the squaring would cost meaningful accuracy.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reciprocal condition threshold below which a normal matrix is rejected.
pub const RCOND_THRESHOLD: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Builds an n x k matrix from k columns of equal length.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Dimension("columns of unequal length".into()));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other[(l, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Horizontal concatenation; all blocks must share the row count.
    pub fn hstack(blocks: &[&Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Dimension("hstack blocks have different row counts".into()));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Square sub-block `[r0..r0+n, c0..c0+m]`.
    pub fn block(&self, r0: usize, c0: usize, n: usize, m: usize) -> Matrix {
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out[(i, j)] = self[(r0 + i, c0 + j)];
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W' diag(weights) W`.
pub fn weighted_gram(w: &Matrix, weights: &[f64]) -> Matrix {
    let q = w.ncols();
    let mut g = Matrix::zeros(q, q);
    for (i, &f) in weights.iter().enumerate() {
        if f == 0.0 {
            continue;
        }
        let row = w.row(i);
        for a in 0..q {
            let fa = f * row[a];
            for b in 0..=a {
                g.data[a * q + b] += fa * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            g.data[b * q + a] = g.data[a * q + b];
        }
    }
    g
}

/// `W' diag(weights) v`.
pub fn weighted_cross(w: &Matrix, weights: &[f64], v: &[f64]) -> Vec<f64> {
    let q = w.ncols();
    let mut out = vec![0.0; q];
    for (i, (&f, &vi)) in weights.iter().zip(v).enumerate() {
        let fv = f * vi;
        for (o, x) in out.iter_mut().zip(w.row(i)) {
            *o += fv * x;
        }
    }
    out
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension("Cholesky of a non-square matrix".into()));
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut s = a[(j, j)];
            for k in 0..j {
                s -= l[(j, k)] * l[(j, k)];
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::NotPositiveDefinite(format!("pivot {j} is {s:.3e}")));
            }
            let d = s.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.nrows();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[(i, k)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.l.nrows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// Inverse of a general square matrix by Gaussian elimination with partial pivoting.
pub fn lu_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension("inverse of a non-square matrix".into()));
    }
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap_or(col);
        if m[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::Singular(format!("zero pivot in column {col}")));
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(piv * n + j, col * n + j);
                inv.data.swap(piv * n + j, col * n + j);
            }
        }
        let p = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = m[(i, col)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                m.data[i * n + j] -= factor * m.data[col * n + j];
                inv.data[i * n + j] -= factor * inv.data[col * n + j];
            }
        }
    }
    Ok(inv)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let total: f64 = m.data.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    (values, vectors)
}

/// Reciprocal condition number of a symmetric PSD matrix after unit-diagonal
/// equilibration, plus the columns loading on its smallest eigenvector when
/// the matrix is judged singular.
pub(crate) fn equilibrated_rcond(a: &Matrix) -> (f64, Vec<usize>) {
    let n = a.nrows();
    let d = a.diag();
    let zero: Vec<usize> = (0..n).filter(|&j| !(d[j] > 0.0)).collect();
    if !zero.is_empty() {
        return (0.0, zero);
    }
    let s: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut e = a.clone();
    for i in 0..n {
        for j in 0..n {
            e[(i, j)] *= s[i] * s[j];
        }
    }
    let (vals, vecs) = symmetric_eigen(&e);
    let max = vals.last().copied().unwrap_or(0.0);
    let min = vals.first().copied().unwrap_or(0.0);
    let rcond = if max > 0.0 { (min / max).max(0.0) } else { 0.0 };
    let offenders = if rcond < RCOND_THRESHOLD && n > 0 {
        let v0 = vecs.column(0);
        let peak = v0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        (0..n).filter(|&j| v0[j].abs() >= 0.1 * peak).collect()
    } else {
        Vec::new()
    };
    (rcond, offenders)
}

/// Cholesky factor of a normal matrix after the reciprocal-condition check.
/// `names` labels the columns in the rank-deficiency error.
pub(crate) fn factor_normal_matrix(normal: &Matrix, names: &[String]) -> Result<Cholesky> {
    let (rcond, offenders) = equilibrated_rcond(normal);
    if rcond < RCOND_THRESHOLD {
        return Err(Error::RankDeficient {
            rcond,
            columns: offenders
                .into_iter()
                .map(|j| names.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
                .collect(),
        });
    }
    Cholesky::new(normal).map_err(|_| Error::RankDeficient {
        rcond,
        columns: Vec::new(),
    })
}

/// Minimizer of `sum_i weights_i (d_i - W_i mu)^2`, solved through the
/// normal equations `(W'VW) mu = W'Vd` with a Cholesky factor.
pub fn solve_wls(w: &Matrix, weights: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let names: Vec<String> = (0..w.ncols()).map(|j| format!("column {j}")).collect();
    solve_wls_named(w, weights, d, &names)
}

pub fn solve_wls_named(w: &Matrix, weights: &[f64], d: &[f64], names: &[String]) -> Result<Vec<f64>> {
    let n = w.nrows();
    if weights.len() != n || d.len() != n {
        return Err(Error::Dimension(format!(
            "design has {n} rows but {} weights and {} responses",
            weights.len(),
            d.len()
        )));
    }
    if n < w.ncols() {
        return Err(Error::Dimension(format!("{n} observations for {} coefficients", w.ncols())));
    }
    if weights.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
        return Err(Error::Domain("weights must be finite and nonnegative".into()));
    }
    let normal = weighted_gram(w, weights);
    let rhs = weighted_cross(w, weights, d);
    let chol = factor_normal_matrix(&normal, names)?;
    Ok(chol.solve(&rhs))
}
