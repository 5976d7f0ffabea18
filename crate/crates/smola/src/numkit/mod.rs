//! Deterministic dense numeric kernels.
//!
//! Everything here is a pure function of its inputs: matrices are immutable
//! after construction and safe to share across threads. There is no internal
//! parallelism; determinism is the contract.

mod csv;
mod matrix;
mod rng;
mod svd;

pub use csv::{matrix_from_csv, matrix_to_csv};
pub use matrix::{gelu, gelu_derivative, gelu_matrix, Axis, Matrix, NORM_EPSILON};
pub use rng::{derive_seed, mix64, Rng};
pub use svd::{jacobi_svd, Svd};

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn small_matrix(max_dim: usize, scale: f64) -> impl Strategy<Value = Matrix> {
        (1..=max_dim, 1..=max_dim).prop_flat_map(move |(r, c)| {
            proptest::collection::vec(-scale..scale, r * c)
                .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
        })
    }

    /// Entries at magnitude up to 1e6 but with bounded spread within the
    /// matrix: beyond a spread of ~36 the dominant softmax entry rounds to
    /// exactly 1.0 in f64 and strict interior bounds stop being representable.
    fn offset_matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
        (1..=max_dim, 1..=max_dim, -1e6..1e6_f64).prop_flat_map(move |(r, c, offset)| {
            proptest::collection::vec(-15.0..15.0_f64, r * c)
                .prop_map(move |data| {
                    Matrix::from_vec(r, c, data.into_iter().map(|v| v + offset).collect()).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(m in offset_matrix(8)) {
            let s = m.softmax(Axis::OverCols);
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v > 0.0 && v < 1.0 || s.cols() == 1));
            }
            let s = m.softmax(Axis::OverRows);
            for c in 0..s.cols() {
                let sum: f64 = (0..s.rows()).map(|r| s.get(r, c)).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn l2_normalize_is_idempotent(m in small_matrix(8, 100.0)) {
            let once = m.l2_normalize_rows(NORM_EPSILON);
            let twice = once.l2_normalize_rows(NORM_EPSILON);
            for (a, b) in once.data().iter().zip(twice.data().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(
            a in small_matrix(5, 2.0),
            bc in proptest::collection::vec(-2.0..2.0, 50)
        ) {
            // Shape-compatible chain a(r x c) * b(c x 5) * c(5 x 3).
            let cols = a.cols();
            let b = Matrix::from_vec(cols, 5, bc.iter().cycle().take(cols * 5).copied().collect()).unwrap();
            let c = Matrix::from_vec(5, 3, bc.iter().take(15).copied().collect()).unwrap();
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().frobenius_norm();
            let scale = left.frobenius_norm().max(1.0);
            prop_assert!(diff / scale < 1e-9);
        }
    }
}
