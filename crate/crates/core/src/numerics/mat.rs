use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr", into = "MatRepr")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatRepr> for Mat {
    type Error = Error;

    fn try_from(r: MatRepr) -> Result<Self> {
        Mat::from_vec(r.rows, r.cols, r.data)
    }
}

impl From<Mat> for MatRepr {
    fn from(m: Mat) -> Self {
        MatRepr {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{} entries ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::arg(format!("matrix entry is not finite: {bad}")));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::arg("ragged rows"));
        }
        Mat::from_vec(r, c, rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// Diagonal matrix from a vector.
    pub fn diag(v: &[f64]) -> Self {
        let n = v.len();
        let mut m = Mat::zeros(n, n);
        for (i, &x) in v.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "mat_mul",
                format!("{}x{} * {}x_", self.rows, self.cols, self.cols),
                format!("{}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
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
        Ok(out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn check_same(&self, other: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Mat {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matvec", self.cols, x.len()));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Rows `start..start+len` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Mat {
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Columns `start..start+len` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Mat {
        Mat::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }
}

/// Textbook matrix product.
pub fn mat_mul(a: &Mat, b: &Mat) -> Result<Mat> {
    a.matmul(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn identity_times_m_is_m() {
        let m = Mat::from_rows(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, 5.0], &[0.0, 7.0, -1.0]]).unwrap();
        assert_eq!(mat_mul(&Mat::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = mat_mul(&a, &b).unwrap();
        assert_eq!(c, Mat::from_rows(&[&[2.0], &[4.0]]).unwrap());
    }

    #[test]
    fn zero_annihilates() {
        let m = Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(mat_mul(&Mat::zeros(2, 2), &m).unwrap(), Mat::zeros(2, 2));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let err = mat_mul(&Mat::zeros(2, 3), &Mat::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Mat::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Mat::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn associativity_on_random_triples() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..50 {
            let a = rng.gaussian(0.0, 1.0, (4, 4)).unwrap();
            let b = rng.gaussian(0.0, 1.0, (4, 4)).unwrap();
            let c = rng.gaussian(0.0, 1.0, (4, 4)).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm();
            assert!(rel <= 1e-10, "relative error {rel}");
        }
    }

    #[test]
    fn json_roundtrip_validates_shape() {
        let m = Mat::from_rows(&[&[1.0, 2.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<Mat>(&s).unwrap(), m);
        assert!(serde_json::from_str::<Mat>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }
}
