//! Small dense linear-algebra helpers for the low-dimensional subproblems.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{CoreError, Result};

/// Solves `A x = b` for a small dense square system via LU with partial pivoting.
pub fn solve(a: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(CoreError::DimensionMismatch {
            field: "solve: matrix",
            expected: n,
            got: a.ncols(),
        });
    }
    if b.len() != n {
        return Err(CoreError::DimensionMismatch {
            field: "solve: rhs",
            expected: n,
            got: b.len(),
        });
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    for col in 0..n {
        // pivot
        let mut piv = col;
        let mut best = lu[[col, col]].abs();
        for row in col + 1..n {
            let v = lu[[row, col]].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(CoreError::NonFinite {
                field: "solve: singular or non-finite matrix",
            });
        }
        if piv != col {
            for j in 0..n {
                lu.swap([col, j], [piv, j]);
            }
            x.swap(col, piv);
        }
        for row in col + 1..n {
            let factor = lu[[row, col]] / lu[[col, col]];
            lu[[row, col]] = 0.0;
            for j in col + 1..n {
                lu[[row, j]] -= factor * lu[[col, j]];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= lu[[col, col]];
        for row in 0..col {
            x[row] -= lu[[row, col]] * x[col];
        }
    }
    Ok(x)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn max_eigenvalue_sym(a: &ArrayView2<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    // deterministic tilt so symmetric starting vectors do not sit in a null space
    for (j, x) in v.iter_mut().enumerate() {
        *x += 1e-3 * (j as f64 + 1.0);
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = v.dot(&a.dot(&v));
        if (next - lambda).abs() <= 1e-13 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Smallest eigenvalue of a symmetric positive-definite matrix via inverse
/// power iteration (falls back to shifted power iteration when `A` is
/// singular, in which case the result is 0 up to iteration error).
pub fn min_eigenvalue_sym(a: &ArrayView2<f64>, iters: usize) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    for (j, x) in v.iter_mut().enumerate() {
        *x += 1e-3 * (j as f64 + 1.0);
    }
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = match solve(a, &v.view()) {
            Ok(w) => w,
            Err(_) => {
                // singular: smallest eigenvalue of the shifted complement
                let lmax = max_eigenvalue_sym(a, iters);
                let mut shifted = -a.to_owned();
                for j in 0..n {
                    shifted[[j, j]] += lmax;
                }
                return lmax - max_eigenvalue_sym(&shifted.view(), iters);
            }
        };
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = v.dot(&a.dot(&v));
        if (next - lambda).abs() <= 1e-13 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Spectral norm of a (possibly rectangular) matrix via power iteration on `A^T A`.
pub fn spectral_norm(a: &ArrayView2<f64>, iters: usize) -> f64 {
    let ata = a.t().dot(a);
    max_eigenvalue_sym(&ata.view(), iters).max(0.0).sqrt()
}

/// Orthonormalizes the columns of a square matrix in place (modified Gram-Schmidt).
pub fn orthonormalize(a: &mut Array2<f64>) {
    let n = a.ncols();
    for j in 0..n {
        for k in 0..j {
            let proj = a.column(j).dot(&a.column(k));
            let col_k = a.column(k).to_owned();
            let mut col_j = a.column_mut(j);
            col_j.scaled_add(-proj, &col_k);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt();
        if norm > 0.0 {
            a.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn solve_identity() {
        let a = Array2::eye(3);
        let b = array![1.0, 2.0, 3.0];
        let x = solve(&a.view(), &b.view()).unwrap();
        assert_abs_diff_eq!(x[0], 1.0);
        assert_abs_diff_eq!(x[2], 3.0);
    }

    #[test]
    fn solve_general() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let x = solve(&a.view(), &b.view()).unwrap();
        // residual check
        let r = &a.dot(&x) - &b;
        assert!(r.dot(&r).sqrt() < 1e-12);
    }

    #[test]
    fn solve_rejects_singular() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![1.0, 2.0];
        assert!(solve(&a.view(), &b.view()).is_err());
    }

    #[test]
    fn eigenvalue_bounds_diag() {
        let a = Array2::from_diag(&array![1.0, 5.0, 1000.0]);
        let lmax = max_eigenvalue_sym(&a.view(), 200);
        let lmin = min_eigenvalue_sym(&a.view(), 500);
        assert_abs_diff_eq!(lmax, 1000.0, epsilon = 1e-6);
        assert_abs_diff_eq!(lmin, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn orthonormalize_produces_rotation() {
        let mut a = array![[1.0, 2.0, 0.5], [0.3, 1.0, -1.0], [0.0, 0.7, 2.0]];
        orthonormalize(&mut a);
        let gram = a.t().dot(&a);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], want, epsilon = 1e-12);
            }
        }
    }
}
