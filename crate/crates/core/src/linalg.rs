//! Small dense helpers shared by the modules. Nothing here counts flops.

use nalgebra::{DMatrix, DVector};

/// Induced ∞-norm (maximum absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && {
        let scale = 1.0 + max_abs(m);
        let n = m.nrows();
        (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
///
/// The argument is scaled so that its 1-norm is at most 1/2; the series is
/// summed until the next term is below 1e-18 relative to the partial sum.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(m.is_square(), "expm of a non-square matrix");
    let n = m.nrows();
    let norm1 = m
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0i32;
    if norm1 > 0.5 {
        squarings = libm::ceil(libm::log2(norm1 / 0.5)) as i32;
    }
    let scaled = m * libm::pow(2.0, -(squarings as f64));

    let mut sum = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for k in 1..=40 {
        term = &term * &scaled / (k as f64);
        sum += &term;
        if max_abs(&term) <= 1e-18 * (1.0 + max_abs(&sum)) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Smallest singular value ratio test: number of singular values above
/// `tol * max(1, σ_max)`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let cutoff = tol * smax.max(1.0);
    svd.singular_values.iter().filter(|&&s| s > cutoff).count()
}
