//! Dense kernels: a strided GEMM wrapper and QR-based least squares.

use nalgebra::DMatrix;

use crate::error::{shape_err, LasdiError, Result};

/// Whether an operand enters a product as-is or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

fn dims(m: &DMatrix<f64>, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.nrows(), m.ncols()),
        Op::T => (m.ncols(), m.nrows()),
    }
}

fn strides(m: &DMatrix<f64>, op: Op) -> (isize, isize) {
    let ld = m.nrows() as isize;
    match op {
        Op::N => (1, ld),
        Op::T => (ld, 1),
    }
}

/// `c <- alpha * op(a) * op(b) + beta * c`.
pub(crate) fn gemm(alpha: f64, a: &DMatrix<f64>, ta: Op, b: &DMatrix<f64>, tb: Op, beta: f64, c: &mut DMatrix<f64>) {
    gemm_out(alpha, a, ta, b, tb, beta, c, Op::N);
}

/// [`gemm`] with the product stored as `op(c)`: with `Op::T`, `c` holds the
/// transpose of the product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_out(
    alpha: f64,
    a: &DMatrix<f64>,
    ta: Op,
    b: &DMatrix<f64>,
    tb: Op,
    beta: f64,
    c: &mut DMatrix<f64>,
    tc: Op,
) {
    let (m, k) = dims(a, ta);
    let (k2, n) = dims(b, tb);
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(dims(c, tc), (m, n), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        *c *= beta;
        return;
    }
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    let (rsc, csc) = strides(c, tc);
    // SAFETY: strides and dimensions describe the column-major buffers of
    // `a`, `b`, and `c` exactly, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Allocating product `op(a) * op(b)`.
pub(crate) fn matmul(a: &DMatrix<f64>, ta: Op, b: &DMatrix<f64>, tb: Op) -> DMatrix<f64> {
    let (m, _) = dims(a, ta);
    let (_, n) = dims(b, tb);
    let mut c = DMatrix::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c);
    c
}

/// Condition threshold beyond which an unregularized fit is refused.
pub const RANK_TOL: f64 = 1e12;

/// Solves `min ||A x - b||^2 + lambda ||x||^2` for every column of `b` via
/// Householder QR of the (optionally ridge-augmented) system.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let (m, n) = a.shape();
    if b.nrows() != m {
        return shape_err(format!("least squares: A has {m} rows, b has {}", b.nrows()));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(LasdiError::InvalidArgument(format!("ridge weight must be >= 0, got {lambda}")));
    }
    let (a_aug, b_aug) = if lambda > 0.0 {
        let mut aa = DMatrix::zeros(m + n, n);
        aa.view_mut((0, 0), (m, n)).copy_from(a);
        let s = lambda.sqrt();
        for j in 0..n {
            aa[(m + j, j)] = s;
        }
        let mut bb = DMatrix::zeros(m + n, b.ncols());
        bb.view_mut((0, 0), (m, b.ncols())).copy_from(b);
        (aa, bb)
    } else {
        (a.clone(), b.clone())
    };
    if a_aug.nrows() < n {
        return shape_err(format!("least squares needs at least {n} rows, got {}", a_aug.nrows()));
    }
    let qr = a_aug.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition < RANK_TOL) {
        return Err(LasdiError::RankDeficient { condition });
    }
    let qtb = qr.q().tr_mul(&b_aug);
    let rhs = qtb.rows(0, n).into_owned();
    r.solve_upper_triangular(&rhs)
        .ok_or(LasdiError::RankDeficient { condition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn least_squares_vec(a: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
        let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        Ok(least_squares(a, &bm, lambda)?.column(0).into_owned())
    }

    #[test]
    fn gemm_transposed_output() {
        let a = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 1.0);
        let b = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 0.3);
        let mut c = DMatrix::from_element(2, 3, 1.0);
        gemm_out(2.0, &a, Op::N, &b, Op::N, 0.5, &mut c, Op::T);
        let expect = (&a * &b * 2.0).transpose().add_scalar(0.5);
        assert!((c - expect).amax() < 1e-13);
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let a = DMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 1.0);
        let b = DMatrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64 - 0.3);
        let reference = &a * &b;
        let at = a.transpose();
        let bt = b.transpose();
        for got in [
            matmul(&a, Op::N, &b, Op::N),
            matmul(&at, Op::T, &b, Op::N),
            matmul(&a, Op::N, &bt, Op::T),
            matmul(&at, Op::T, &bt, Op::T),
        ] {
            assert!((got - &reference).norm() < 1e-12);
        }

        let mut c = DMatrix::from_element(3, 2, 1.0);
        gemm(2.0, &a, Op::N, &b, Op::N, 0.5, &mut c);
        let expect = reference * 2.0 + DMatrix::from_element(3, 2, 0.5);
        assert!((c - expect).norm() < 1e-12);
    }

    #[test]
    fn least_squares_exact_and_ridge() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let x_true = DVector::from_row_slice(&[0.5, -2.0]);
        let b = &a * &x_true;
        let x = least_squares_vec(&a, &b, 0.0).unwrap();
        assert!((x - &x_true).norm() < 1e-12);

        // Ridge matches the normal equations (A^T A + lambda I) x = A^T b.
        let lambda = 0.3;
        let xr = least_squares_vec(&a, &b, lambda).unwrap();
        let normal = a.transpose() * &a + DMatrix::identity(2, 2) * lambda;
        let xn = normal.lu().solve(&(a.transpose() * &b)).unwrap();
        assert!((xr - xn).norm() < 1e-12);
    }

    #[test]
    fn rank_deficiency_reported() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let b = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        assert!(matches!(least_squares_vec(&a, &b, 0.0), Err(LasdiError::RankDeficient { .. })));
        assert!(least_squares_vec(&a, &b, 1e-6).is_ok());
    }
}
