//! Dense row-major `f64` matrix with the handful of kernels the rest of the
//! crate is built on: product, transpose, stable softmax, l2 row
//! normalization, element-wise maps, and an exact text round-trip format.

use crate::error::{Result, SmolaError};

/// Axis selector for [`Matrix::softmax`].
///
/// `OverCols` normalizes within each row (every row sums to 1); `OverRows`
/// normalizes within each column (every column sums to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    OverCols,
    OverRows,
}

/// Global epsilon guard for l2 normalization, below any meaningful norm at
/// unit-scale data.
pub const NORM_EPSILON: f64 = 1e-12;

/// Dense 2-D real array in row-major order.
#[derive(Debug, Clone, PartialEq)]
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

    /// Builds a matrix from row-major data. Fails if the length does not
    /// equal `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SmolaError::ShapeMismatch {
                context: "Matrix::from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the given rows (in the given order) into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut out = Self::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mut sink = 0u64;
        self.matmul_impl(other, &mut sink)
    }

    /// Matrix product that tallies one count per fused multiply-add actually
    /// executed. The counter is incremented in the inner accumulation loop so
    /// it measures work done, not a shape formula.
    pub fn matmul_counting(&self, other: &Self, madds: &mut u64) -> Result<Self> {
        self.matmul_impl(other, madds)
    }

    fn matmul_impl(&self, other: &Self, madds: &mut u64) -> Result<Self> {
        if self.cols != other.rows {
            return Err(SmolaError::ShapeMismatch {
                context: "matmul",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                    *madds += 1;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Adds `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SmolaError::ShapeMismatch {
                context: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Self,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(SmolaError::ShapeMismatch {
                context,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Numerically stabilized softmax along the chosen axis: the per-slice
    /// maximum is subtracted before exponentiation.
    pub fn softmax(&self, axis: Axis) -> Self {
        let mut out = self.clone();
        match axis {
            Axis::OverCols => {
                for r in 0..self.rows {
                    softmax_slice(out.row_mut(r));
                }
            }
            Axis::OverRows => {
                let mut column = vec![0.0; self.rows];
                for c in 0..self.cols {
                    for r in 0..self.rows {
                        column[r] = out.get(r, c);
                    }
                    softmax_slice(&mut column);
                    for r in 0..self.rows {
                        out.set(r, c, column[r]);
                    }
                }
            }
        }
        out
    }

    /// Divides each row by `max(l2 norm, epsilon)`. Rows with norm below
    /// epsilon pass through scaled by `1/epsilon` (zero rows stay zero).
    pub fn l2_normalize_rows(&self, epsilon: f64) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(epsilon);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        out
    }
}

fn softmax_slice(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Scalar GeLU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const CUBIC: f64 = 0.044_715;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + CUBIC * x * x * x)).tanh())
}

/// Derivative of the tanh-approximation GeLU.
pub fn gelu_derivative(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const CUBIC: f64 = 0.044_715;
    let inner = SQRT_2_OVER_PI * (x + CUBIC * x * x * x);
    let t = inner.tanh();
    let sech_sq = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech_sq * SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x)
}

/// Element-wise GeLU over a matrix.
pub fn gelu_matrix(m: &Matrix) -> Matrix {
    m.map(gelu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        // Independent triple-loop accumulation in a different loop order.
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_passthrough() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let id = Matrix::identity(3);
        assert_eq!(id.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let z = Matrix::zeros(3, 4);
        let out = a.matmul(&z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_scalar_oracle() {
        let mut rng = crate::numkit::Rng::new(11);
        let a = Matrix::from_fn(3, 4, |_, _| rng.next_gaussian());
        let b = Matrix::from_fn(4, 2, |_, _| rng.next_gaussian());
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data().iter().zip(want.data().iter()) {
            assert_eq!(g, w, "row-sweep product must equal triple-loop oracle exactly");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "got: {msg}");
    }

    #[test]
    fn matmul_counting_matches_shape_product() {
        let a = Matrix::zeros(3, 5);
        let b = Matrix::zeros(5, 7);
        let mut madds = 0u64;
        a.matmul_counting(&b, &mut madds).unwrap();
        assert_eq!(madds, 3 * 5 * 7);
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = m.softmax(Axis::OverCols);
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form_row() {
        let m = Matrix::from_vec(1, 2, vec![2.0_f64.ln(), 0.0]).unwrap();
        let s = m.softmax(Axis::OverCols);
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_at_large_magnitude() {
        // Storing ln2 + 1e6 already rounds the input to ~1e-10 absolute, so
        // the check is against that representation limit, not 1e-12.
        let m = Matrix::from_vec(1, 2, vec![2.0_f64.ln() + 1e6, 1e6]).unwrap();
        let s = m.softmax(Axis::OverCols);
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-10);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-10);
        let sum: f64 = s.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_over_rows_normalizes_columns() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 5.0, 3.0, -2.0]).unwrap();
        let s = m.softmax(Axis::OverRows);
        for c in 0..2 {
            let sum: f64 = (0..2).map(|r| s.get(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_pythagorean_row() {
        let m = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let n = m.l2_normalize_rows(NORM_EPSILON);
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_identity_fixed_point() {
        let m = Matrix::identity(4);
        assert_eq!(m.l2_normalize_rows(NORM_EPSILON), m);
    }

    #[test]
    fn l2_normalize_zero_row_stays_zero() {
        let m = Matrix::zeros(1, 3);
        let n = m.l2_normalize_rows(NORM_EPSILON);
        assert!(n.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_large_positive_asymptote() {
        let x = 30.0;
        assert!((gelu(x) - x).abs() / x < 1e-6);
    }

    #[test]
    fn gelu_at_one_matches_independent_evaluation() {
        // Re-derive the tanh approximation with free-standing scalar code.
        let x = 1.0_f64;
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let expected = 0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh());
        assert!((gelu(x) - expected).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.0, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(
                (gelu_derivative(x) - fd).abs() < 1e-8,
                "x={x}: analytic {} vs fd {fd}",
                gelu_derivative(x)
            );
        }
    }

    #[test]
    fn gelu_monotone_on_grid() {
        // Monotone region only; gelu dips below zero with a minimum near -0.75.
        let mut prev = gelu(-0.5);
        let mut x = -0.5 + 0.05;
        while x <= 4.0 {
            let cur = gelu(x);
            assert!(cur >= prev, "gelu not monotone at x={x}");
            prev = cur;
            x += 0.05;
        }
    }
}
