//! Linear algebra kernels shared by the solvers: a CSR matrix, a banded LU
//! with partial pivoting (real and complex), small dense helpers on top of
//! `faer`, and a shift-and-invert Krylov approximation of `exp(-tA)v`.

mod banded;
mod dense;
mod krylov;
mod scalar;
mod sparse;

pub use banded::BandLu;
pub use dense::{
    columns, eig, eig_complex, expm, mat_from_columns, mat_vec, min_max_singular_values, orthonormal_basis, phi1_times, solve,
    solve_complex, spectral_norm, symmetric_eig,
};
pub use krylov::ResolventKrylov;
pub use scalar::Scalar;
pub use sparse::CsrMatrix;

use num_complex::Complex64;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Bilinear (non-conjugating) pairing `sum a_i b_i`.
#[inline]
pub fn cdot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hermitian inner product `sum conj(a_i) b_i`.
#[inline]
pub fn cdotc(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[inline]
pub fn cnorm2(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Orthonormalizes `v` against the columns in `basis` with two passes of
/// classical Gram-Schmidt. Returns the norm of the remainder before scaling.
pub fn orthonormalize_against(basis: &[Vec<f64>], v: &mut [f64]) -> f64 {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, v);
            axpy(-c, q, v);
        }
    }
    let nrm = norm2(v);
    if nrm > 0.0 {
        scale(1.0 / nrm, v);
    }
    nrm
}

/// Complex counterpart of [`orthonormalize_against`] (Hermitian inner product).
pub fn corthonormalize_against(basis: &[Vec<Complex64>], v: &mut [Complex64]) -> f64 {
    for _ in 0..2 {
        for q in basis {
            let c = cdotc(q, v);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
    }
    let nrm = cnorm2(v);
    if nrm > 0.0 {
        let inv = 1.0 / nrm;
        v.iter_mut().for_each(|z| *z *= inv);
    }
    nrm
}
