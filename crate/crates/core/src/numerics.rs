//! Plain row-major f64 linear algebra.
//!
//! Everything accumulates in index order (rows outer, columns inner, reduction
//! left to right), so a given input produces bit-identical output on every
//! run. No SIMD, no blocking, no parallel reductions: reproducibility over
//! speed at the scales this crate targets.

use crate::error::{Error, Result};

/// Dense row-major matrix. `data[r * cols + c]` holds entry (r, c).
#[derive(Debug, Clone, PartialEq)]
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

    /// Builds a matrix from row slices. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    what: "matrix row",
                    expected: cols,
                    actual: rows[i].len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                what: "flat matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert!(r < self.rows);
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Appends one row. The row length must match the column count; a matrix
    /// with zero rows adopts the length of the first pushed row.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        } else if row.len() != self.cols {
            return Err(Error::LengthMismatch {
                what: "pushed row",
                expected: self.cols,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// New matrix holding the given rows of `self`, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (i, &r) in indices.iter().enumerate() {
            if r >= self.rows {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: self.rows,
                });
            }
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        Ok(out)
    }

    /// New matrix holding columns `[start, start + width)` of `self`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        if start + width > self.cols {
            return Err(Error::IndexOutOfRange {
                index: start + width,
                len: self.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax: subtracts the running maximum before
/// exponentiating, then divides by the sum. An all-equal input maps to the
/// exactly uniform distribution because every shifted logit is 0.0.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut exps = Vec::with_capacity(logits.len());
    let mut sum = 0.0;
    for &l in logits {
        let e = (l - max).exp();
        exps.push(e);
        sum += e;
    }
    for e in &mut exps {
        *e /= sum;
    }
    Ok(exps)
}

/// `a * b` with the reduction over `k` running left to right for every output
/// entry, so results are reproducible bit for bit.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose: output (i, j) is the dot
/// of row i of `a` with row j of `b`, reduced left to right.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.set(i, j, dot(a.row(i), b.row(j)));
        }
    }
    Ok(out)
}

/// `m * x` for a column vector `x`.
pub fn matvec(m: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    if m.cols != x.len() {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            lhs_rows: m.rows,
            lhs_cols: m.cols,
            rhs_rows: x.len(),
            rhs_cols: 1,
        });
    }
    Ok((0..m.rows).map(|i| dot(m.row(i), x)).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &x in v {
        acc += x * x;
    }
    acc.sqrt()
}

/// Elementwise `a - b`; lengths must already agree.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Elementwise `a + b`; lengths must already agree.
pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
#[allow(clippy::excessive_precision)] // frozen reference digits exceed f64 on purpose
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_matches_reference_values() {
        // Reference values computed at 30-digit precision.
        let w = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert_close(w[0], 0.090030573170380457998, 1e-15);
        assert_close(w[1], 0.244728471054797652470, 1e-15);
        assert_close(w[2], 0.665240955774821889530, 1e-15);
        let sum: f64 = w.iter().sum();
        assert_close(sum, 1.0, 1e-12);
    }

    #[test]
    fn softmax_single_logit_is_exactly_one() {
        assert_eq!(softmax(&[42.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_all_equal_is_exactly_uniform() {
        let w = softmax(&[7.5, 7.5, 7.5, 7.5]).unwrap();
        // exp(0) is exactly 1, so each entry is exactly 1/4.
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn softmax_empty_input_is_an_error() {
        let err = softmax(&[]).unwrap_err();
        assert!(err.to_string().contains("empty logits"));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let w = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = softmax(&[-1000.0, 1000.0]).unwrap();
        assert_eq!(w[1], 1.0);
        assert_eq!(w[0], 0.0);
    }

    #[test]
    fn matmul_small_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.to_nested(), vec![vec![3.0], vec![7.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn l2_norm_of_unit_axis_vector() {
        assert_eq!(l2_norm(&[0.0, 1.0, 0.0]), 1.0);
        assert_eq!(l2_norm(&[]), 0.0);
        assert_close(l2_norm(&[3.0, 4.0]), 5.0, 0.0);
    }

    #[test]
    fn select_rows_preserves_order_given() {
        let m = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = m.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.to_nested(), vec![vec![3.0], vec![1.0]]);
    }

    #[test]
    fn slice_cols_takes_contiguous_block() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]).unwrap();
        let s = m.slice_cols(1, 2).unwrap();
        assert_eq!(s.to_nested(), vec![vec![2.0, 3.0], vec![6.0, 7.0]]);
    }

    #[test]
    fn push_row_rejects_wrong_width() {
        let mut m = Matrix::zeros(0, 0);
        m.push_row(&[1.0, 2.0]).unwrap();
        assert!(m.push_row(&[1.0]).is_err());
        assert_eq!(m.rows(), 1);
    }

    #[test]
    fn matmul_bt_equals_matmul_with_transpose() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.5, -1.0], vec![2.0, -2.0, 0.25]]).unwrap();
        assert_eq!(
            matmul_bt(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.transpose().transpose(), m);
    }
}
