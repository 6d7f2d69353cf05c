//! Dense row-major `f64` matrices, small factorizations and seeded Gaussian sampling.
//!
//! Everything here is sized for the problems in this crate (token dimension in
//! the tens, sample counts in the thousands), so the routines are plain loops
//! with no blocking or SIMD.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub, SubAssign};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Power iteration budget for [`Matrix::operator_norm`].
pub const POWER_ITERATIONS: usize = 200;
/// Relative convergence tolerance for [`Matrix::operator_norm`].
pub const POWER_TOLERANCE: f64 = 1e-10;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                write!(f, "{:>11.4e} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a `rows x cols` matrix from column vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::DimensionMismatch("ragged columns".into()));
        }
        Ok(Matrix::from_fn(rows, columns.len(), |r, c| columns[c][r]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        assert_eq!(values.len(), self.rows, "column length mismatch");
        for (r, &v) in values.iter().enumerate() {
            self[(r, c)] = v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Matrix product. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t: column mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: length mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `self^T * v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec: length mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * alpha).collect(),
        }
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * a b^T`.
    pub fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) {
        assert_eq!((a.len(), b.len()), self.shape(), "add_outer: shape mismatch");
        for (i, &ai) in a.iter().enumerate() {
            let s = alpha * ai;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += s * bj;
            }
        }
    }

    pub fn outer(a: &[f64], b: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(a.len(), b.len());
        m.add_outer(1.0, a, b);
        m
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        Matrix::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(
            r0 + block.rows <= self.rows && c0 + block.cols <= self.cols,
            "set_block out of range"
        );
        for r in 0..block.rows {
            for c in 0..block.cols {
                self[(r0 + r, c0 + c)] = block[(r, c)];
            }
        }
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(1.0);
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }

    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }

    /// Largest singular value by power iteration on `M^T M`.
    ///
    /// Starts from the normalized all-ones vector; if that start is annihilated
    /// by `M` the standard basis vectors are tried in order.
    pub fn operator_norm(&self) -> f64 {
        if self.data.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        let n = self.cols;
        let starts = std::iter::once(vec![1.0 / (n as f64).sqrt(); n]).chain((0..n).map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        }));
        for start in starts {
            let sigma = self.power_iterate(start);
            if sigma > 0.0 {
                return sigma;
            }
        }
        0.0
    }

    fn power_iterate(&self, mut v: Vec<f64>) -> f64 {
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let w = self.tr_matvec(&self.matvec(&v));
            let norm_w = norm(&w);
            if norm_w == 0.0 {
                return 0.0;
            }
            let converged = (norm_w - lambda).abs() <= POWER_TOLERANCE * norm_w;
            lambda = norm_w;
            v = w.into_iter().map(|x| x / norm_w).collect();
            if converged {
                break;
            }
        }
        lambda.sqrt()
    }

    /// Lower Cholesky factor `L` with `L L^T = self`.
    ///
    /// Fails with [`Error::NotSpd`] for non-symmetric input or a non-positive pivot.
    pub fn cholesky(&self) -> Result<Matrix> {
        if !self.is_square() || !self.is_symmetric(1e-12) {
            return Err(Error::NotSpd);
        }
        let n = self.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = self[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if diag.is_nan() || diag <= 0.0 {
                return Err(Error::NotSpd);
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(l)
    }

    /// Solves `self x = b` for symmetric positive definite `self`.
    pub fn solve_spd(&self, b: &[f64]) -> Result<Vec<f64>> {
        let l = self.cholesky()?;
        let n = self.rows;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[(i, k)] * y[k]).sum();
            y[i] = (b[i] - s) / l[(i, i)];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[(k, i)] * x[k]).sum();
            x[i] = (y[i] - s) / l[(i, i)];
        }
        Ok(x)
    }

    /// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// Returns eigenvalues in ascending order and the matrix whose columns are
    /// the matching orthonormal eigenvectors.
    pub fn sym_eigen(&self) -> Result<(Vec<f64>, Matrix)> {
        if !self.is_square() {
            return Err(Error::NonSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut a = self.symmetrized();
        let mut v = Matrix::identity(n);
        let total = a.frobenius_norm().max(f64::MIN_POSITIVE);
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * total {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    if apq.abs() < f64::MIN_POSITIVE {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
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
        order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
        let values = order.iter().map(|&i| a[(i, i)]).collect();
        let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
        Ok((values, vectors))
    }

    /// Determinant by LU with partial pivoting.
    pub fn determinant(&self) -> Result<f64> {
        if !self.is_square() {
            return Err(Error::NonSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap_or(col);
            if a[(pivot, col)] == 0.0 {
                return Ok(0.0);
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                }
                det = -det;
            }
            let p = a[(col, col)];
            det *= p;
            for r in col + 1..n {
                let factor = a[(r, col)] / p;
                for c in col..n {
                    let v = a[(col, c)];
                    a[(r, c)] -= factor * v;
                }
            }
        }
        Ok(det)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

impl Add<&Matrix> for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub<&Matrix> for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&Matrix> for Matrix {
    fn add_assign(&mut self, rhs: &Matrix) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Matrix> for Matrix {
    fn sub_assign(&mut self, rhs: &Matrix) {
        self.axpy(-1.0, rhs);
    }
}

impl Mul<&Matrix> for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

impl Mul<f64> for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: f64) -> Matrix {
        self.scale(rhs)
    }
}

/// `m^k` by repeated squaring; `m^0 = I`.
pub fn matpow(m: &Matrix, k: usize) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::NonSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    let mut result = Matrix::identity(m.rows);
    let mut base = m.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = result.matmul(&base);
        }
        e >>= 1;
        if e > 0 {
            base = base.matmul(&base);
        }
    }
    Ok(result)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scaled(a: &[f64], alpha: f64) -> Vec<f64> {
    a.iter().map(|x| alpha * x).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream.
///
/// The generator is ChaCha8 seeded through `seed_from_u64`; normal variates use
/// the ziggurat sampler of `rand_distr::StandardNormal`. Child streams come from
/// [`RngStream::derive`], which mixes the parent seed and a stream index with
/// SplitMix64 and never touches the parent's state.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn derive(&self, stream: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Draws a fresh seed from this stream; used to fan out per-task streams.
    pub fn fork_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }

    /// Chi-square variate with `df > 0` degrees of freedom.
    pub fn chi_squared(&mut self, df: f64) -> f64 {
        ChiSquared::new(df).expect("positive degrees of freedom").sample(&mut self.rng)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }
}

/// `rows x cols` matrix of i.i.d. standard normal entries, filled row by row.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    Matrix {
        rows,
        cols,
        data: rng.normal_vec(rows * cols),
    }
}

/// `d x count` matrix whose columns are i.i.d. `N(0, cov)`.
pub fn gaussian_with_cov(rng: &mut RngStream, cov: &Matrix, count: usize) -> Result<Matrix> {
    let l = cov.cholesky()?;
    let z = gaussian_matrix(rng, cov.rows(), count);
    Ok(l.matmul(&z))
}

/// Haar-distributed orthogonal matrix: Gram-Schmidt (two passes) on a Gaussian
/// matrix with column signs fixed by the diagonal of `R`.
pub fn random_orthogonal(rng: &mut RngStream, d: usize) -> Matrix {
    let g = gaussian_matrix(rng, d, d);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let original = g.column(j);
        let mut v = original.clone();
        for _pass in 0..2 {
            for qi in &q {
                let proj = dot(qi, &v);
                v.iter_mut().zip(qi).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let nv = norm(&v);
        let mut u: Vec<f64> = v.iter().map(|x| x / nv).collect();
        if dot(&u, &original) < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        q.push(u);
    }
    Matrix::from_fn(d, d, |r, c| q[c][r])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Matrix {
        gaussian_matrix(&mut RngStream::new(seed), rows, cols).scale(scale)
    }

    fn naive_power(m: &Matrix, k: usize) -> Matrix {
        (0..k).fold(Matrix::identity(m.rows()), |acc, _| acc.matmul(m))
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let a = gaussian_matrix(&mut RngStream::new(11), 2, 2);
        let b = gaussian_matrix(&mut RngStream::new(11), 2, 2);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = gaussian_matrix(&mut RngStream::new(12), 2, 2);
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn scalar_draws_have_unit_normal_moments() {
        let n = 1_000_000;
        let draws = RngStream::new(2024).normal_vec(n);
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn identity_covariance_matches_plain_gaussian() {
        let a = gaussian_with_cov(&mut RngStream::new(5), &Matrix::identity(3), 4).unwrap();
        let b = gaussian_matrix(&mut RngStream::new(5), 3, 4);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn diagonal_covariance_is_reproduced_empirically() {
        let cov = Matrix::from_diag(&[4.0, 1.0]);
        let count = 100_000;
        let x = gaussian_with_cov(&mut RngStream::new(8), &cov, count).unwrap();
        let emp = x.matmul_t(&x).scale(1.0 / count as f64);
        assert!((emp[(0, 0)] - 4.0).abs() < 0.05 * 4.0);
        assert!((emp[(1, 1)] - 1.0).abs() < 0.05);
        // off-diagonal target is 0; compare against 5% of the smallest variance
        assert!(emp[(0, 1)].abs() < 0.05);
    }

    #[test]
    fn covariance_with_negative_eigenvalue_is_rejected() {
        let cov = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            gaussian_with_cov(&mut RngStream::new(1), &cov, 3),
            Err(Error::NotSpd)
        ));
        let asym = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(asym.cholesky(), Err(Error::NotSpd)));
    }

    #[test]
    fn matpow_edge_cases() {
        let m = random_matrix(3, 4, 4, 1.0);
        assert_eq!(matpow(&m, 0).unwrap(), Matrix::identity(4));
        let d = Matrix::from_diag(&[2.0, -0.5]);
        assert_eq!(matpow(&d, 3).unwrap(), Matrix::from_diag(&[8.0, -0.125]));
        assert!(matches!(
            matpow(&Matrix::zeros(2, 3), 2),
            Err(Error::NonSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn matpow_matches_naive_product() {
        let m = random_matrix(99, 3, 3, 0.7);
        let fast = matpow(&m, 5).unwrap();
        let slow = naive_power(&m, 5);
        let rel = (&fast - &slow).frobenius_norm() / slow.frobenius_norm();
        assert!(rel < 1e-12, "relative error {rel}");
    }

    #[test]
    fn random_orthogonal_contract() {
        let u1 = random_orthogonal(&mut RngStream::new(4), 1);
        assert!((u1[(0, 0)].abs() - 1.0).abs() < 1e-15);
        for (seed, d) in [(1, 2), (2, 5), (3, 10), (4, 24)] {
            let u = random_orthogonal(&mut RngStream::new(seed), d);
            let err = (&u.transpose().matmul(&u) - &Matrix::identity(d)).frobenius_norm();
            assert!(err < 1e-12, "d={d}: {err}");
            let det = u.determinant().unwrap();
            assert!((det.abs() - 1.0).abs() < 1e-10, "det {det}");
        }
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let mut rng = RngStream::new(21);
        let u = random_orthogonal(&mut rng, 6);
        let lambda = [-3.0, -1.0, 0.0, 0.5, 2.0, 7.0];
        let a = u.matmul(&Matrix::from_diag(&lambda)).matmul(&u.transpose());
        let (values, vectors) = a.sym_eigen().unwrap();
        for (v, l) in values.iter().zip(lambda) {
            assert!((v - l).abs() < 1e-12);
        }
        let rebuilt = vectors
            .matmul(&Matrix::from_diag(&values))
            .matmul(&vectors.transpose());
        assert!((&rebuilt - &a).frobenius_norm() < 1e-12);
    }

    #[test]
    fn operator_norm_of_diagonal_and_rank_one() {
        let d = Matrix::from_diag(&[1.0, -5.0, 3.0]);
        assert!((d.operator_norm() - 5.0).abs() < 1e-9);
        // all-ones start lies in the kernel of this matrix
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, -2.0]]).unwrap();
        assert!((m.operator_norm() - 10f64.sqrt()).abs() < 1e-9);
        assert_eq!(Matrix::zeros(3, 3).operator_norm(), 0.0);
    }

    #[test]
    fn solve_spd_round_trips() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = a.solve_spd(&[1.0, 2.0]).unwrap();
        let b = a.matvec(&x);
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 2.0).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn matpow_is_a_homomorphism(seed in any::<u64>(), dim in 1usize..5, j in 0usize..=8, k in 0usize..=8) {
            let raw = random_matrix(seed, dim, dim, 1.0);
            let m = raw.scale(2.0 / raw.frobenius_norm().max(1e-12));
            let lhs = matpow(&m, j + k).unwrap();
            let rhs = matpow(&m, j).unwrap().matmul(&matpow(&m, k).unwrap());
            let scale = lhs.frobenius_norm().max(1.0);
            prop_assert!((&lhs - &rhs).frobenius_norm() <= 1e-10 * scale);
        }

        #[test]
        fn norm_sandwich(seed in any::<u64>(), rows in 1usize..7, cols in 1usize..7) {
            let m = random_matrix(seed, rows, cols, 1.0);
            let op = m.operator_norm();
            let fro = m.frobenius_norm();
            let k = (rows.min(cols) as f64).sqrt();
            prop_assert!(op <= fro * (1.0 + 1e-9));
            prop_assert!(fro <= k * op * (1.0 + 1e-6));
        }

        #[test]
        fn gaussian_output_is_reproducible(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
            let a = gaussian_matrix(&mut RngStream::new(seed), rows, cols);
            let b = gaussian_matrix(&mut RngStream::new(seed), rows, cols);
            let bytes_a: Vec<u8> = a.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
            let bytes_b: Vec<u8> = b.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
            prop_assert_eq!(bytes_a, bytes_b);
        }
    }
}
