use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Hidden states, velocities, attention matrices and every weight in the
/// crate are carried by this one type. Vectors (biases, LN gains, gate
/// parameters) are stored as `1 x d` matrices.
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
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate width.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// `self * b`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(), b.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[p * m..(p + 1) * m];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self^T * b` without materializing the transpose.
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(shape_err(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape(), b.shape()),
            ));
        }
        let (k, n, m) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &b.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self * b^T` without materializing the transpose.
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape(), b.shape()),
            ));
        }
        let (n, k, m) = (self.rows, self.cols, b.rows);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &b.data[j * k..(j + 1) * k];
                out.push(dot(a_row, b_row));
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += c * other`.
    pub fn add_scaled_assign(&mut self, other: &Matrix, c: f64) -> Result<()> {
        self.same_shape(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} for matrix {:?}", bias.shape(), self.shape()),
            ));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(shape_err(
                "slice_cols",
                format!("{start}..{} of {} columns", start + len, self.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: len,
            data,
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if parts.iter().any(|p| p.cols != cols) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix {
            rows: data.len() / cols.max(1),
            cols,
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Matrix> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Mean over rows, as a `1 x cols` matrix.
    pub fn mean_rows(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Matrix::row_vector(out)
    }

    /// Returns a copy with rows reordered: output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Matrix {
            rows: perm.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product; see [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Numerically stable softmax applied independently to each row.
pub fn row_softmax(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite("row_softmax"));
    }
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Prng;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn identity_product() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), Matrix::from_rows(&[[2.0], [4.0]]));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = Prng::new(11);
        let a = crate::numerics::gaussian_init(&mut rng, 5, 7, 1.0);
        let b = crate::numerics::gaussian_init(&mut rng, 7, 3, 1.0);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
        let at = a.transpose();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
        let bt = b.transpose();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = row_softmax(&Matrix::from_rows(&[[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = row_softmax(&Matrix::from_rows(&[[1000.0, 0.0]])).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() <= 1e-12 && s.get(0, 1) <= 1e-12);
        let s = row_softmax(&Matrix::from_rows(&[[1f64.ln(), 2f64.ln(), 3f64.ln()]])).unwrap();
        for (j, want) in [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0].iter().enumerate() {
            assert!((s.get(0, j) - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::from_rows(&[[0.0, f64::NAN]]);
        assert!(matches!(row_softmax(&m), Err(Error::NonFinite(_))));
    }

    fn mat(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-scale..scale, rows * cols)
            .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_associative(a in mat(3, 4, 2.0), b in mat(4, 5, 2.0), c in mat(5, 2, 2.0)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0) * 100.0;
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }

        #[test]
        fn softmax_rows_sum_to_one(m in mat(4, 6, 1000.0)) {
            let s = row_softmax(&m).unwrap();
            for r in s.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(m in mat(3, 5, 50.0), c in -100.0..100.0f64) {
            let shifted = m.map(|v| v + c);
            let d = row_softmax(&m).unwrap().max_abs_diff(&row_softmax(&shifted).unwrap());
            prop_assert!(d <= 1e-12);
        }
    }
}
