//! Small dense helpers shared by the numeric modules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix buffer".into(),
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix rows".into(),
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Returns a copy with rows reordered so that row `i` of the result is
    /// row `order[i]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: order.len(),
            cols: self.cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `v / ‖v‖` together with `‖v‖`, or `ZeroNorm` when the norm is not
/// strictly positive and finite.
pub fn normalized(v: &[f64], context: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::ZeroNorm(context.to_string()));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Back-propagates a gradient through `h = f / ‖f‖`.
///
/// Given `dL/dh`, the unit vector `h` and `‖f‖`, returns
/// `dL/df = (g − h (h·g)) / ‖f‖`.
pub fn normalize_backward(grad_unit: &[f64], unit: &[f64], raw_norm: f64) -> Vec<f64> {
    let proj = dot(grad_unit, unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, h)| (g - h * proj) / raw_norm)
        .collect()
}

pub fn is_unit(v: &[f64], tol: f64) -> bool {
    (norm(v) - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_three_four() {
        let (u, n) = normalized(&[3.0, 4.0, 0.0], "t").unwrap();
        assert_eq!(n, 5.0);
        assert_eq!(u, vec![0.6, 0.8, 0.0]);
    }

    #[test]
    fn normalized_zero_is_error() {
        assert!(matches!(normalized(&[0.0, 0.0], "t"), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let f = [0.3, -1.2, 0.7, 2.0];
        let g = [0.5, 0.1, -0.4, 0.9];
        let loss = |f: &[f64]| {
            let (h, _) = normalized(f, "t").unwrap();
            dot(&h, &g)
        };
        let (h, n) = normalized(&f, "t").unwrap();
        let analytic = normalize_backward(&g, &h, n);
        let eps = 1e-6;
        for k in 0..f.len() {
            let mut plus = f;
            let mut minus = f;
            plus[k] += eps;
            minus[k] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!((fd - analytic[k]).abs() < 1e-8, "k={k}");
        }
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }
}
