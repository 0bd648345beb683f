//! Row-major dense matrices.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense row-major matrix. `data.len() == rows * cols` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
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

    /// Single-row matrix.
    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
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
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact panics on zero width
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    /// Gathers the listed rows into a new matrix, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the first `n` columns.
    pub fn truncate_cols(&self, n: usize) -> Self {
        Self::from_fn(self.rows, n.min(self.cols), |i, j| self.get(i, j))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Sum over rows, giving one value per column.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.iter_rows() {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn column_means(&self) -> Vec<T> {
        let n = T::from_count(self.rows.max(1));
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Subtracts the per-column mean from every row.
    pub fn center_columns(&self) -> Self {
        let means = self.column_means();
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, &m) in out.row_mut(i).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Converts element type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Matrix product; see [`matmul`].
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }
}

/// Standard matrix product `a · b`.
///
/// The i-k-j loop order is fixed so results are bit-reproducible.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &ari) in arow.iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &brj) in orow.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type M = Matrix<f64>;

    #[test]
    fn identity_times_matrix() {
        let b = M::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&M::identity(2), &b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = M::from_rows(&[[1.0, 2.0]]);
        let b = M::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), M::from_rows(&[[11.0]]));
    }

    #[test]
    fn zero_times_anything() {
        let z = M::zeros(2, 2);
        let b = M::from_rows(&[[1.0, -2.0, 3.0], [4.0, 5.0, -6.0]]);
        assert_eq!(matmul(&z, &b).unwrap(), M::zeros(2, 3));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = matmul(&M::zeros(2, 3), &M::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::Dimension {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let a = M::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = M::from_fn(3, 2, |i, j| (i + 2 * j) as f64 * 0.5);
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&a.transpose(), &b).unwrap());
        let c = M::from_fn(5, 4, |i, j| (i as f64) - (j as f64));
        let nt = matmul_nt(&a, &c).unwrap();
        assert_eq!(nt, matmul(&a, &c.transpose()).unwrap());
    }

    #[test]
    fn generic_over_f32() {
        let a = Matrix::<f32>::from_rows(&[[1.0, 2.0]]);
        let b = Matrix::<f32>::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&a, &b).unwrap().get(0, 0), 11.0f32);
    }

    fn mat(rows: usize, cols: usize) -> impl Strategy<Value = M> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| M::new(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative((a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5)
            .prop_flat_map(|(m, n, p, q)| (mat(m, n), mat(n, p), mat(p, q))))
        {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
        }

        #[test]
        fn matmul_is_deterministic(a in mat(4, 3), b in mat(3, 5)) {
            let x = matmul(&a, &b).unwrap();
            let y = matmul(&a, &b).unwrap();
            prop_assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
