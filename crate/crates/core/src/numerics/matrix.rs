use crate::error::{Error, Result};
use crate::par;

use super::Real;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

/// N×d matrix holding one token per row.
pub type TokenMatrix<T> = Matrix<T>;

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Wraps row-major `data`, which must hold `rows * cols` values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Length {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also rejects NaN and infinities.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "matrix data",
                index,
            });
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Length {
                    what: "matrix row",
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · rhs`.
    ///
    /// Each output element accumulates left to right over the inner
    /// dimension starting from zero, so results match a naive triple loop
    /// bit for bit and do not depend on the thread count.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        par::for_each_row_mut(&mut out.data, rhs.cols, |i, out_row| {
            for (k, &a) in self.row(i).iter().enumerate() {
                axpy(a, rhs.row(k), out_row);
            }
        });
        Ok(out)
    }

    /// `selfᵀ · rhs` without forming the transpose. Summation runs left to
    /// right over the shared row index.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape("matmul_tn", self.shape(), rhs.shape()));
        }
        // Shared rows are visited in blocks so each block of `rhs` stays in
        // cache across all output rows; per element the order is unchanged.
        const BLOCK: usize = 256;
        let mut out = Self::zeros(self.cols, rhs.cols);
        for start in (0..self.rows).step_by(BLOCK) {
            let end = (start + BLOCK).min(self.rows);
            par::for_each_row_mut(&mut out.data, rhs.cols, |p, out_row| {
                for j in start..end {
                    axpy(self.get(j, p), rhs.row(j), out_row);
                }
            });
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&self, factors: &[T]) -> Result<Self> {
        if factors.len() != self.rows {
            return Err(Error::Length {
                what: "row factors",
                expected: self.rows,
                got: factors.len(),
            });
        }
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v = *v * f);
        }
        Ok(out)
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }

    /// Euclidean norm of every row.
    pub fn row_l2_norm(&self) -> Vec<T> {
        self.iter_rows()
            .map(|r| r.iter().fold(T::zero(), |s, &v| s + v * v).sqrt())
            .collect()
    }

    /// Row softmax with the row maximum subtracted before exponentiation.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        par::for_each_row_mut(&mut out.data, self.cols, |_, row| softmax_in_place(row));
        out
    }

    /// Concatenates `self` and `rhs` side by side.
    pub fn hcat(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape("hcat", self.shape(), rhs.shape()));
        }
        let cols = self.cols + rhs.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(rhs.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::OutOfBounds {
                what: "column block",
                index: start + width,
                len: self.cols,
            });
        }
        Ok(Self::from_fn(self.rows, width, |i, j| {
            self.data[i * self.cols + start + j]
        }))
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Self) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::shape("set_column_block", self.shape(), block.shape()));
        }
        for i in 0..self.rows {
            let dst = i * self.cols + start;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    /// Rows `indices[0], indices[1], ...` stacked in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::OutOfBounds {
                    what: "row",
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Sum over rows, accumulated top to bottom.
    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            sums.iter_mut().zip(row).for_each(|(s, &v)| *s = *s + v);
        }
        sums
    }
}

/// `out += a · x`.
#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], out: &mut [T]) {
    out.iter_mut().zip(x).for_each(|(o, &v)| *o = *o + a * v);
}

/// Dot product with eight interleaved accumulators combined in a fixed order.
///
/// Deterministic, but not the left-to-right order used by [`Matrix::matmul`].
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: T = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for l in 0..8 {
            acc[l] = acc[l] + ca[l] * cb[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeededRng;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_times_m() {
        let mut rng = SeededRng::new(3);
        let m: Matrix<f64> = rng.uniform_matrix(3, 3, 1.0);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_expanded_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matches_triple_loop_bitwise() {
        let mut rng = SeededRng::new(8);
        let a: Matrix<f64> = rng.uniform_matrix(8, 8, 1.0);
        let b: Matrix<f64> = rng.uniform_matrix(8, 8, 1.0);
        assert_eq!(a.matmul(&b).unwrap(), naive(&a, &b));
        assert_eq!(a.matmul_tn(&b).unwrap(), naive(&a.transpose(), &b));
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let err = a.matmul(&Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes 2x3 and 2x3");
    }

    #[test]
    fn relu_cases() {
        let m = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(m.relu().data(), &[0.0, 2.0]);
        let neg = Matrix::from_vec(2, 2, vec![-1.0, -0.5, -3.0, -1e-9]).unwrap();
        assert_eq!(neg.relu(), Matrix::zeros(2, 2));
        let pos = Matrix::from_vec(1, 3, vec![0.0, 1.0, 5.0]).unwrap();
        assert_eq!(pos.relu(), pos);
    }

    #[test]
    fn row_norms() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0, 0.0, 0.0], vec![0.0; 4], vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(m.row_l2_norm(), vec![5.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_cases() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0], vec![0.0, 3f64.ln()]]).unwrap();
        let s = m.softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        assert!((s.get(2, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(2, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rejected() {
        let err = Matrix::from_vec_finite(1, 2, vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                what: "matrix data",
                index: 1
            }
        );
        assert!(Matrix::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn dot_matches_plain_sum() {
        let mut rng = SeededRng::new(1);
        let a: Matrix<f64> = rng.uniform_matrix(1, 37, 1.0);
        let b: Matrix<f64> = rng.uniform_matrix(1, 37, 1.0);
        let plain: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        assert!((dot(a.data(), b.data()) - plain).abs() < 1e-14);
    }
}
