use faer::linalg::solvers::Solve;
use faer::{c64, Mat};
use num_complex::Complex64;

use crate::{Error, Result};

/// Builds an `n x k` matrix whose columns are the given vectors.
pub fn mat_from_columns(cols: &[Vec<f64>]) -> Mat<f64> {
    let n = cols.first().map_or(0, Vec::len);
    Mat::from_fn(n, cols.len(), |i, j| cols[j][i])
}

pub fn columns(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|j| m.col_as_slice(j).to_vec()).collect()
}

pub fn mat_vec(m: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.ncols(), x.len());
    let mut y = vec![0.0; m.nrows()];
    for (j, xj) in x.iter().enumerate() {
        if *xj != 0.0 {
            for (yi, mij) in y.iter_mut().zip(m.col_as_slice(j)) {
                *yi += mij * xj;
            }
        }
    }
    y
}

fn norm_inf(a: &Mat<f64>) -> f64 {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by diagonal Padé approximation of degree 6 with
/// scaling and squaring (scaled norm at most 1/2).
pub fn expm(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if n == 0 {
        return Mat::zeros(0, 0);
    }
    let nrm = norm_inf(a);
    let s = if nrm > 0.5 { (nrm / 0.5).log2().ceil() as i32 } else { 0 };
    let scale = 0.5f64.powi(s);
    let x = Mat::from_fn(n, n, |i, j| a[(i, j)] * scale);

    const Q: usize = 6;
    let mut c = [0.0f64; Q + 1];
    c[0] = 1.0;
    for k in 1..=Q {
        c[k] = c[k - 1] * (Q - k + 1) as f64 / (k * (2 * Q - k + 1)) as f64;
    }
    let mut num = Mat::<f64>::identity(n, n);
    let mut den = Mat::<f64>::identity(n, n);
    let mut pow = Mat::<f64>::identity(n, n);
    for (k, ck) in c.iter().enumerate().skip(1) {
        pow = &pow * &x;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        for j in 0..n {
            for i in 0..n {
                num[(i, j)] += ck * pow[(i, j)];
                den[(i, j)] += sign * ck * pow[(i, j)];
            }
        }
    }
    let mut e = den.partial_piv_lu().solve(&num);
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

/// `phi_1(a) b = sum_k a^k b / (k+1)!`, via the exponential of an augmented
/// block matrix.
pub fn phi1_times(a: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    let n = a.nrows();
    let aug = Mat::from_fn(n + 1, n + 1, |i, j| {
        if i < n && j < n {
            a[(i, j)]
        } else if i < n && j == n {
            b[i]
        } else {
            0.0
        }
    });
    let e = expm(&aug);
    (0..n).map(|i| e[(i, n)]).collect()
}

/// Extreme singular values `(sigma_min, sigma_max)`; `sigma_min` is zero
/// for wide matrices.
pub fn min_max_singular_values(m: &Mat<f64>) -> (f64, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0.0, 0.0);
    }
    let sv = m.singular_values().expect("svd failed to converge");
    let smax = sv.first().copied().unwrap_or(0.0);
    let smin = if m.nrows() < m.ncols() { 0.0 } else { sv.last().copied().unwrap_or(0.0) };
    (smin, smax)
}

pub fn spectral_norm(m: &Mat<f64>) -> f64 {
    min_max_singular_values(m).1
}

/// Solves `a x = b` for square `a`, rejecting numerically singular systems.
pub fn solve(a: &Mat<f64>, b: &Mat<f64>) -> Result<Mat<f64>> {
    let (smin, smax) = min_max_singular_values(a);
    if !(smin > smax * 1e-14) {
        return Err(Error::SingularMatrix { pivot: 0 });
    }
    Ok(a.partial_piv_lu().solve(b))
}

pub fn solve_complex(a: &Mat<c64>, b: &Mat<c64>) -> Mat<c64> {
    a.partial_piv_lu().solve(b)
}

/// Eigenvalues and right eigenvectors (columns) of a real square matrix.
pub fn eig(a: &Mat<f64>) -> Result<(Vec<Complex64>, Mat<c64>)> {
    let evd = a.eigen().map_err(|_| Error::EigenNonConvergence { residuals: vec![] })?;
    let s = evd.S().column_vector();
    let vals = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Eigenvalues and right eigenvectors of a complex square matrix.
pub fn eig_complex(a: &Mat<c64>) -> Result<(Vec<Complex64>, Mat<c64>)> {
    let evd = a.eigen().map_err(|_| Error::EigenNonConvergence { residuals: vec![] })?;
    let s = evd.S().column_vector();
    let vals = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Eigenvalues of a real symmetric matrix in ascending order, with
/// orthonormal eigenvectors.
pub fn symmetric_eig(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| Error::EigenNonConvergence { residuals: vec![] })?;
    let s = evd.S().column_vector();
    Ok(((0..a.nrows()).map(|i| s[i]).collect(), evd.U().to_owned()))
}

/// Orthonormal basis of the column span (thin QR).
pub fn orthonormal_basis(m: &Mat<f64>) -> Mat<f64> {
    m.qr().compute_thin_Q()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_rotation_generator() {
        let t = 2.7;
        let a = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 1) => -t,
            (1, 0) => t,
            _ => 0.0,
        });
        let e = expm(&a);
        assert!((e[(0, 0)] - t.cos()).abs() < 1e-13);
        assert!((e[(1, 0)] - t.sin()).abs() < 1e-13);
    }

    #[test]
    fn expm_of_stiff_diagonal() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { [-3.0e4, -1.0, 2.5][i] } else { 0.0 });
        let e = expm(&a);
        assert!(e[(0, 0)].abs() < 1e-300 + 1e-15);
        // sixteen squarings amplify the rounding of the scaled approximant
        assert!((e[(1, 1)] / (-1.0f64).exp() - 1.0).abs() < 1e-10);
        assert!((e[(2, 2)] / 2.5f64.exp() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn expm_with_jordan_block() {
        // exp([[l, 1], [0, l]]) = e^l [[1, 1], [0, 1]]
        let l = -0.4;
        let a = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) | (1, 1) => l,
            (0, 1) => 1.0,
            _ => 0.0,
        });
        let e = expm(&a);
        assert!((e[(0, 1)] - l.exp()).abs() < 1e-14);
        assert!(e[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn phi1_scalar() {
        let a = Mat::from_fn(1, 1, |_, _| -2.0);
        let v = phi1_times(&a, &[3.0]);
        let exact = 3.0 * ((-2.0f64).exp() - 1.0) / -2.0;
        assert!((v[0] - exact).abs() < 1e-14);
    }

    #[test]
    fn singular_values_of_diag() {
        let m = mat_from_columns(&[vec![3.0, 0.0, 0.0], vec![0.0, -0.5, 0.0]]);
        let (smin, smax) = min_max_singular_values(&m);
        assert!((smin - 0.5).abs() < 1e-14 && (smax - 3.0).abs() < 1e-14);
    }
}
