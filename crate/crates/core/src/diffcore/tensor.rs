use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major matrix. Every element is finite.
#[derive(Clone, PartialEq)]
pub struct Tensor2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor2D<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of operations on finite inputs;
    /// the finiteness check is still performed.
    pub(crate) fn from_op(rows: usize, cols: usize, data: Vec<T>, op: &str) -> Result<Self> {
        debug_assert_eq!(data.len(), rows * cols);
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op} produced non-finite value at ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape");
        assert!(value.is_finite());
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// Column vector from values.
    pub fn column(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    /// Row vector from values.
    pub fn row_vector(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
    }

    /// Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data).expect("from_fn produced invalid tensor")
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view; callers must keep every element finite.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        assert!(i < self.rows && j < self.cols, "index ({i}, {j}) out of bounds");
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_column(&self) -> bool {
        self.cols == 1
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul of {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Self::from_op(n, m, out, "matmul")
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_op(self.rows, self.cols, data, "elementwise op")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_op(self.rows, self.cols, data, "map")
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    /// Applies a row/column permutation: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Self {
        assert!(self.is_square() && perm.len() == self.rows);
        Self::from_fn(self.rows, self.cols, |i, j| self.get(perm[i], perm[j]))
    }

    /// Permutes rows: `out[i] = self[perm[i]]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rows);
        Self::from_fn(self.rows, self.cols, |i, j| self.get(perm[i], j))
    }

    /// Converts into another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor2D<U> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor2D<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{}) [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            if i > 0 {
                write!(f, "; ")?;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (j, v) in row.iter().take(8).enumerate() {
                if j > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v:?}")?;
            }
            if self.cols > 8 {
                write!(f, ", ..")?;
            }
        }
        if self.rows > 8 {
            write!(f, "; ..")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_data() {
        assert!(matches!(
            Tensor2D::<f64>::new(2, 2, vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor2D::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Tensor2D::<f64>::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(Tensor2D::identity(3).matmul(&x).unwrap(), x);
        let a = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor2D::column(vec![0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor2D::<f64>::zeros(2, 3);
        let b = Tensor2D::<f64>::zeros(2, 3);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("2x3 by 2x3"), "{msg}");
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let a = Tensor2D::row_vector(vec![1e300, 1e300]).unwrap();
        let b = Tensor2D::column(vec![1e300, 1e300]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor2D::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), a.get(1, 2));
    }
}
