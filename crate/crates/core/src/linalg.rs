//! Small dense linear algebra.
//!
//! Everything here works on row-major [`Matrix`] values. The systems solved by
//! the integrator are tiny (the iteration matrix is `n_x × n_x`), while the QP
//! layer works with a few hundred unknowns, so plain `O(n^3)` kernels are
//! sufficient.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Relative pivot threshold below which a matrix is declared singular.
pub const SINGULAR_PIVOT_RTOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is singular to working precision (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionError { expected: String, found: String },
    #[error("matrix is not positive definite (pivot {pivot:e} at column {column})")]
    NotPositiveDefinite { column: usize, pivot: f64 },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

fn dim_err(expected: impl fmt::Display, found: impl fmt::Display) -> LinalgError {
    LinalgError::DimensionError {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Induced infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn tr_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "tr_matmul row counts differ");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            axpy(vi, self.row(i), &mut out);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled_assign(&mut self, s: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(s, &other.data, &mut self.data);
    }

    /// Copies a `src` block into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, src: &Matrix) {
        assert!(r0 + src.rows <= self.rows && c0 + src.cols <= self.cols);
        for i in 0..src.rows {
            let dst =
                &mut self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + src.cols];
            dst.copy_from_slice(src.row(i));
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(
                &self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + cols],
            );
        }
        out
    }

    /// Symmetric part `(A + Aᵀ)/2`, used to scrub rounding drift in BFGS updates.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn norm_1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn norm_2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Packed LU factors of a row-permuted square matrix: `P·A = L·U`.
///
/// `L` has a unit diagonal and is stored strictly below the diagonal of `lu`;
/// `U` occupies the diagonal and above. `pivots[k]` is the original row that
/// ended up in position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuFactors {
    pub lu: Matrix,
    pub pivots: Vec<usize>,
}

impl LuFactors {
    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    pub fn lower(&self) -> Matrix {
        let n = self.dim();
        let mut l = Matrix::identity(n);
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = self.lu[(i, j)];
            }
        }
        l
    }

    pub fn upper(&self) -> Matrix {
        let n = self.dim();
        let mut u = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                u[(i, j)] = self.lu[(i, j)];
            }
        }
        u
    }

    /// Applies the row permutation to `a`, returning `P·a`.
    pub fn permute(&self, a: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), a.cols());
        for (k, &p) in self.pivots.iter().enumerate() {
            out.row_mut(k).copy_from_slice(a.row(p));
        }
        out
    }

    /// Solves `A·x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.dim();
        if b.len() != n {
            return Err(dim_err(
                format!("rhs of length {n}"),
                format!("length {}", b.len()),
            ));
        }
        let mut x: Vec<f64> = self.pivots.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let s = dot(&row[..i], &x[..i]);
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s = dot(&row[i + 1..], &x[i + 1..]);
            x[i] = (x[i] - s) / row[i];
        }
        Ok(x)
    }
}

/// LU factorization with partial (row) pivoting.
pub fn lu_factorize(a: &Matrix) -> Result<LuFactors, LinalgError> {
    if !a.is_square() {
        return Err(dim_err(
            "square matrix",
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let n = a.rows();
    let threshold = SINGULAR_PIVOT_RTOL * a.max_abs();
    let mut lu = a.clone();
    let mut pivots: Vec<usize> = (0..n).collect();

    for k in 0..n {
        let mut p = k;
        let mut best = lu[(k, k)].abs();
        for i in (k + 1)..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < threshold || best == 0.0 {
            return Err(LinalgError::SingularMatrix {
                column: k,
                pivot: best,
            });
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            pivots.swap(k, p);
        }
        let pivot = lu[(k, k)];
        for i in (k + 1)..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            if factor != 0.0 {
                for j in (k + 1)..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= factor * u;
                }
            }
        }
    }
    Ok(LuFactors { lu, pivots })
}

/// Solves `A·X = B` column by column using precomputed factors.
pub fn lu_solve(f: &LuFactors, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = f.dim();
    if b.rows() != n {
        return Err(dim_err(format!("{n} rows"), format!("{} rows", b.rows())));
    }
    let m = b.cols();
    let mut x = f.permute(b);
    // Forward substitution with unit-diagonal L, all columns at once.
    for i in 0..n {
        for k in 0..i {
            let l = f.lu[(i, k)];
            if l == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = x[(k, j)];
                x[(i, j)] -= l * v;
            }
        }
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let u = f.lu[(i, k)];
            if u == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = x[(k, j)];
                x[(i, j)] -= u * v;
            }
        }
        let d = f.lu[(i, i)];
        for j in 0..m {
            x[(i, j)] /= d;
        }
    }
    Ok(x)
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(dim_err(
                "square matrix",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite {
                    column: j,
                    pivot: d,
                });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { l })
    }

    pub fn factor_matrix(&self) -> &Matrix {
        &self.l
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let s = dot(&self.l.row(i)[..i], &y[..i]);
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reconstruction_error(a: &Matrix, f: &LuFactors) -> f64 {
        let pa = f.permute(a);
        let lu = f.lower().matmul(&f.upper());
        pa.sub(&lu).norm_inf() / a.norm_inf()
    }

    #[test]
    fn identity_factorizes_trivially() {
        let f = lu_factorize(&Matrix::identity(2)).unwrap();
        assert_eq!(f.lower(), Matrix::identity(2));
        assert_eq!(f.upper(), Matrix::identity(2));
        assert_eq!(f.pivots, vec![0, 1]);
    }

    #[test]
    fn small_spd_reconstructs() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let f = lu_factorize(&a).unwrap();
        assert!(reconstruction_error(&a, &f) <= 1e-12);
    }

    #[test]
    fn permutation_matrix_needs_pivoting() {
        let a = Matrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let f = lu_factorize(&a).unwrap();
        assert_eq!(f.pivots, vec![1, 0]);
        assert!(reconstruction_error(&a, &f) <= 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            lu_factorize(&a),
            Err(LinalgError::SingularMatrix { .. })
        ));
        let z = Matrix::zeros(3, 3);
        assert!(matches!(
            lu_factorize(&z),
            Err(LinalgError::SingularMatrix { .. })
        ));
    }

    #[test]
    fn non_square_is_dimension_error() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            lu_factorize(&a),
            Err(LinalgError::DimensionError { .. })
        ));
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let f = lu_factorize(&Matrix::identity(3)).unwrap();
        let b = Matrix::from_rows(&[&[1.0, -2.0], &[3.5, 0.0], &[7.0, 1e-3]]);
        assert_eq!(lu_solve(&f, &b).unwrap(), b);
    }

    #[test]
    fn solve_two_by_two() {
        let a = Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let f = lu_factorize(&a).unwrap();
        let x = lu_solve(&f, &Matrix::column_vector(&[3.0, 4.0])).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((x[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn solve_rejects_wrong_rhs_rows() {
        let f = lu_factorize(&Matrix::identity(3)).unwrap();
        assert!(matches!(
            lu_solve(&f, &Matrix::zeros(2, 1)),
            Err(LinalgError::DimensionError { .. })
        ));
        assert!(f.solve_vec(&[1.0]).is_err());
    }

    #[test]
    fn multi_rhs_matches_per_column_solves() {
        let a = Matrix::from_rows(&[
            &[4.0, -1.0, 0.5, 0.0],
            &[1.0, 5.0, -2.0, 0.3],
            &[0.0, 2.0, 6.0, -1.0],
            &[0.7, 0.0, 1.0, 3.0],
        ]);
        let f = lu_factorize(&a).unwrap();
        // n_x + n_u = 6 columns, the sensitivity right-hand-side shape.
        let b = Matrix::from_vec(4, 6, (0..24).map(|k| (k as f64 * 0.37).sin()).collect());
        let x = lu_solve(&f, &b).unwrap();
        for j in 0..6 {
            let xj = f.solve_vec(&b.column(j)).unwrap();
            for i in 0..4 {
                assert!((x[(i, j)] - xj[i]).abs() <= 1e-15 * (1.0 + xj[i].abs()));
            }
        }
    }

    #[test]
    fn cholesky_solves_spd() {
        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.0], &[1.0, 3.0, 0.5], &[0.0, 0.5, 2.0]]);
        let c = Cholesky::factor(&a).unwrap();
        let x = c.solve_vec(&[1.0, 2.0, 3.0]);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((ri - bi).abs() < 1e-14);
        }
        let indefinite = Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(Cholesky::factor(&indefinite).is_err());
    }

    /// Diagonally shifted random matrices keep the condition number well below 1e6.
    fn well_conditioned() -> impl Strategy<Value = Matrix> {
        (1usize..9).prop_flat_map(|n| {
            proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |mut d| {
                for i in 0..n {
                    d[i * n + i] += if i % 2 == 0 { n as f64 } else { -(n as f64) };
                }
                Matrix::from_vec(n, n, d)
            })
        })
    }

    proptest! {
        #[test]
        fn lu_reconstruction(a in well_conditioned()) {
            let f = lu_factorize(&a).unwrap();
            prop_assert!(reconstruction_error(&a, &f) <= 1e-12);
        }

        #[test]
        fn lu_solve_residual(a in well_conditioned(), seed in 0u64..1000) {
            let n = a.rows();
            let b: Vec<f64> = (0..n).map(|i| ((seed + i as u64) as f64 * 0.731).cos()).collect();
            let f = lu_factorize(&a).unwrap();
            let x = f.solve_vec(&b).unwrap();
            let ax = a.matvec(&x);
            let r: Vec<f64> = ax.iter().zip(&b).map(|(p, q)| p - q).collect();
            let scale = a.norm_inf() * norm_inf(&x) + norm_inf(&b);
            prop_assert!(norm_inf(&r) / scale <= 1e-12);
        }
    }
}
