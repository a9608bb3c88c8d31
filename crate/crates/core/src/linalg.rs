//! Small dense helpers shared by the filters, the oracle and the model layer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Replaces `m` by `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Lower-triangular factor `L` with `L L' = m` for a positive semi-definite `m`.
///
/// Pivots below `tol` (relative to the largest diagonal entry) are treated as
/// zero and their column is left empty, so singular PSD inputs such as the
/// diffusion matrix at `i = 0` factor cleanly. Returns `None` when a pivot is
/// clearly negative.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max);
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag < -1e-10 * scale.max(1.0) {
            return None;
        }
        if diag <= tol {
            continue;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Some(l)
}

/// Clips negative eigenvalues of a symmetric matrix to zero.
///
/// Returns the most negative eigenvalue seen (0 when none).
pub fn clip_to_psd(m: &mut DMatrix<f64>) -> f64 {
    symmetrize(m);
    if m.clone().cholesky().is_some() {
        return 0.0;
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 0.0 {
        return 0.0;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(m);
    min
}

/// Log-density of `N(mean, cov)` at `y` through a Cholesky solve.
pub fn gaussian_logpdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
    let resid = y - mean;
    let z = chol.l().solve_lower_triangular(&resid).ok_or_else(|| {
        Error::Numerical("triangular solve failed in Gaussian log-density".into())
    })?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (y.len() as f64 * LN_2PI + log_det + z.norm_squared()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Numerically stable `ln(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Inverts a small square matrix stored row-major in `a` (destroyed) into `inv`.
///
/// Gauss-Jordan with partial pivoting; returns `false` on a zero pivot.
pub(crate) fn invert_in_place(a: &mut [f64], inv: &mut [f64], d: usize) -> bool {
    for i in 0..d {
        for j in 0..d {
            inv[i * d + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    for col in 0..d {
        let mut piv = col;
        let mut best = a[col * d + col].abs();
        for r in (col + 1)..d {
            let v = a[r * d + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return false;
        }
        if piv != col {
            for j in 0..d {
                a.swap(col * d + j, piv * d + j);
                inv.swap(col * d + j, piv * d + j);
            }
        }
        let p = a[col * d + col];
        for j in 0..d {
            a[col * d + j] /= p;
            inv[col * d + j] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = a[r * d + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..d {
                a[r * d + j] -= f * a[col * d + j];
                inv[r * d + j] -= f * inv[col * d + j];
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_cholesky_handles_singular_input() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let l = psd_cholesky(&m).unwrap();
        assert_eq!(l, DMatrix::zeros(2, 2));

        let m = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let l = psd_cholesky(&m).unwrap();
        assert!((&l * l.transpose() - &m).abs().max() < 1e-14);
    }

    #[test]
    fn psd_cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(psd_cholesky(&m).is_none());
    }

    #[test]
    fn invert_matches_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 0.3, 1.5, -0.2, 0.0, 0.4, 3.0]);
        let mut a: Vec<f64> = m.transpose().as_slice().to_vec();
        let mut inv = vec![0.0; 9];
        assert!(invert_in_place(&mut a, &mut inv, 3));
        let expected = m.try_inverse().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((inv[i * 3 + j] - expected[(i, j)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn clip_to_psd_removes_small_negative_eigenvalue() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-12]);
        clip_to_psd(&mut m);
        assert!(min_eigenvalue(&m) >= -1e-15);
    }
}
