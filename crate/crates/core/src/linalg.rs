//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Singular values in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Count of singular values strictly above `rel_tol * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = singular_values(a);
    match s.first() {
        Some(&max) if max > 0.0 => s.iter().filter(|&&v| v > rel_tol * max).count(),
        _ => 0,
    }
}

/// Right singular vector of the smallest singular value, with that value.
pub fn smallest_right_singular(a: &DMatrix<f64>) -> (DVector<f64>, f64) {
    let n = a.ncols();
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (k, s) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, s)| (k, *s))
        .expect("non-empty matrix");
    (v_t.row(k).transpose(), s)
}

/// Least-squares solution of `a x = b` through the SVD; `None` when `a` is
/// rank deficient at relative tolerance `rel_tol`.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Option<DVector<f64>> {
    if numerical_rank(a, rel_tol) < a.ncols() {
        return None;
    }
    let svd = a.clone().svd(true, true);
    svd.solve(b, 0.0).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_rank_counts_directions() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(numerical_rank(&a, 1e-8), 2);
        assert_eq!(numerical_rank(&DMatrix::zeros(3, 3), 1e-8), 0);
    }

    #[test]
    fn least_squares_recovers_affine() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let x = least_squares(&a, &b, 1e-12).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        let degenerate = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(least_squares(&degenerate, &DVector::zeros(2), 1e-10).is_none());
    }
}
