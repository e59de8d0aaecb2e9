use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Matrix::from_vec"));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "Matrix::from_rows",
                left: (1, cols),
                right: (1, bad.len()),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::from_vec(rows.len(), cols, data)
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

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out.ensure_finite("matmul")?;
        Ok(out)
    }

    /// Row vector times matrix: `x^T * self`.
    pub fn vecmul(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Shape {
                op: "vecmul",
                left: (1, x.len()),
                right: self.shape(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (k, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vecmul"));
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        self.ensure_finite("axpy")
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Selects the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", self.row(r))?;
            if r + 1 < self.rows {
                write!(f, ", ")?;
            }
        }
        if self.rows > 6 {
            write!(f, "...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;
    use proptest::prelude::*;

    fn random(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0).unwrap())
    }

    #[test]
    fn identity_times_column() {
        let a = Matrix::identity(2);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = RngState::from_seed(7);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::Shape {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let a = Matrix::from_vec(1, 2, vec![1e308, 1e308]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![10.0, 10.0]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite(_))));
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn vecmul_agrees_with_matmul() {
        let mut rng = RngState::from_seed(3);
        let w = random(4, 6, &mut rng);
        let x = random(1, 4, &mut rng);
        let via_matmul = x.matmul(&w).unwrap();
        let via_vec = w.vecmul(x.as_slice()).unwrap();
        assert_eq!(via_matmul.as_slice(), via_vec.as_slice());
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = RngState::from_seed(seed);
            let a = random(n, m, &mut rng);
            let b = random(m, p, &mut rng);
            let c = random(p, q, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }
    }
}
