//! Small dense linear-algebra helpers shared by the fitting and control code.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Row-major JSON form of a dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRepr {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRepr {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixRepr {
    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        (self.data.len() == self.rows * self.cols)
            .then(|| DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// serde adapter: `#[serde(with = "crate::linalg::matrix_serde")]`.
pub mod matrix_serde {
    use super::*;
    use serde::{de::Error, ser, Deserializer, Serializer};

    // JSON has no inf/NaN; serde_json would silently write `null`
    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        if !all_finite(m.iter()) {
            return Err(<S::Error as ser::Error>::custom("matrix has non-finite entries"));
        }
        MatrixRepr::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        repr.to_matrix()
            .ok_or_else(|| D::Error::custom("matrix data length does not match rows*cols"))
    }
}

/// serde adapter for vectors stored as plain arrays.
pub mod vector_serde {
    use super::*;
    use serde::{ser::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        if !all_finite(v.iter()) {
            return Err(S::Error::custom("vector has non-finite entries"));
        }
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

/// `[I_n 0]` with `cols` columns.
pub fn identity_prefix_decoder(n: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, cols, |r, c| if r == c { 1.0 } else { 0.0 })
}

/// Upper bound on the largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration_bound(h: &DMatrix<f64>, iters: usize) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.01 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let hv = h * &v;
        let norm = hv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&hv);
        v = hv / norm;
    }
    // Gershgorin row sums bound the spectrum from above; the Rayleigh quotient
    // from below. Take a safety margin on the latter but never exceed the former.
    let gershgorin = (0..n)
        .map(|r| h.row(r).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (lambda * 1.01).min(gershgorin).max(lambda)
}
