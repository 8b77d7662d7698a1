use super::{CsrMatrix, Scalar};
use crate::{Error, Result};

/// LU factorization with partial pivoting of a banded matrix.
///
/// Row `i` stores columns `i - kl ..= i + kl + ku` (room for pivoting
/// fill-in). Multipliers of step `k` are kept where they were computed; row
/// interchanges of later steps are not applied to them, so solves interleave
/// swaps and eliminations in the original order.
#[derive(Debug, Clone)]
pub struct BandLu<T: Scalar> {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<T>,
    piv: Vec<usize>,
}

impl<T: Scalar> BandLu<T> {
    /// Factors `scale * A + shift * I` for a square CSR matrix `A`.
    pub fn factor_shifted(a: &CsrMatrix, scale: f64, shift: T) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: a.ncols() });
        }
        let (kl, ku) = a.bandwidths();
        let mut lu = Self::zeros(n, kl, ku);
        for (i, j, v) in a.triplets() {
            *lu.at_mut(i, j) = lu.at(i, j) + T::from_real(scale * v);
        }
        for i in 0..n {
            *lu.at_mut(i, i) = lu.at(i, i) + shift;
        }
        lu.factor()?;
        Ok(lu)
    }

    /// Factors a matrix given by `(row, col, value)` entries.
    pub fn factor_entries(n: usize, entries: &[(usize, usize, T)]) -> Result<Self> {
        let mut kl = 0;
        let mut ku = 0;
        for &(i, j, _) in entries {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let mut lu = Self::zeros(n, kl, ku);
        for &(i, j, v) in entries {
            *lu.at_mut(i, j) = lu.at(i, j) + v;
        }
        lu.factor()?;
        Ok(lu)
    }

    fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        BandLu { n, kl, ku, width, data: vec![T::zero(); n * width], piv: vec![0; n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[self.idx(i, j)]
    }

    #[inline]
    fn at_mut(&mut self, i: usize, j: usize) -> &mut T {
        let k = self.idx(i, j);
        &mut self.data[k]
    }

    fn factor(&mut self) -> Result<()> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let mut scale = 0.0f64;
        for v in &self.data {
            scale = scale.max(v.modulus());
        }
        let tiny = scale * f64::EPSILON * 1e-3;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = self.at(k, k).modulus();
            for r in k + 1..=last_row {
                let m = self.at(r, k).modulus();
                if m > best {
                    best = m;
                    p = r;
                }
            }
            if !(best > tiny) {
                return Err(Error::SingularMatrix { pivot: k });
            }
            self.piv[k] = p;
            if p != k {
                for j in k..=last_col {
                    let a = self.idx(k, j);
                    let b = self.idx(p, j);
                    self.data.swap(a, b);
                }
            }
            let pivot = self.at(k, k);
            for r in k + 1..=last_row {
                let l = self.at(r, k) / pivot;
                *self.at_mut(r, k) = l;
                if l.modulus() == 0.0 {
                    continue;
                }
                let rk = self.idx(r, k);
                let kk = self.idx(k, k);
                for off in 1..=(last_col - k) {
                    let u = self.data[kk + off];
                    self.data[rk + off] -= l * u;
                }
            }
        }
        Ok(())
    }

    /// Solves `M x = b` in place.
    pub fn solve_in_place(&self, b: &mut [T]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for r in k + 1..=(k + self.kl).min(n - 1) {
                b[r] -= self.at(r, k) * bk;
            }
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            let kk = self.idx(k, k);
            for j in k + 1..=(k + self.kl + self.ku).min(n - 1) {
                acc -= self.data[kk + (j - k)] * b[j];
            }
            b[k] = acc / self.data[kk];
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves `M^T x = b` in place (plain transpose, no conjugation).
    pub fn solve_transpose_in_place(&self, b: &mut [T]) {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        for k in 0..n {
            let kk = self.idx(k, k);
            let mut acc = b[k];
            for i in k.saturating_sub(self.kl + self.ku)..k {
                acc -= self.at(i, k) * b[i];
            }
            b[k] = acc / self.data[kk];
        }
        for k in (0..n).rev() {
            let mut acc = b[k];
            for r in k + 1..=(k + self.kl).min(n - 1) {
                acc -= self.at(r, k) * b[r];
            }
            b[k] = acc;
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
        }
    }

    pub fn solve_transpose(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_transpose_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn random_band(n: usize, kl: usize, ku: usize, vals: &[f64]) -> CsrMatrix {
        let mut t = Vec::new();
        let mut it = vals.iter().cycle();
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                t.push((i, j, *it.next().unwrap()));
            }
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    proptest! {
        #[test]
        fn solves_match_matvec(
            n in 1usize..30,
            kl in 0usize..4,
            ku in 0usize..4,
            vals in prop::collection::vec(-1.0f64..1.0, 8..40),
            rhs in prop::collection::vec(-1.0f64..1.0, 30),
        ) {
            let a = random_band(n, kl, ku, &vals);
            let Ok(lu) = BandLu::<f64>::factor_shifted(&a, 1.0, 0.0) else { return Ok(()); };
            let b = &rhs[..n];
            let x = lu.solve(b);
            let r = a.mul_vec(&x);
            let xt = lu.solve_transpose(b);
            let rt = a.mul_vec_transpose(&xt);
            let xnorm = x.iter().chain(&xt).fold(1.0f64, |m, v| m.max(v.abs()));
            for i in 0..n {
                prop_assert!((r[i] - b[i]).abs() <= 1e-9 * xnorm);
                prop_assert!((rt[i] - b[i]).abs() <= 1e-9 * xnorm);
            }
        }
    }

    #[test]
    fn complex_shift_solves() {
        let a = random_band(12, 2, 3, &[0.3, -1.2, 2.0, 0.7, -0.1]);
        let s = Complex64::new(0.5, 1.5);
        let lu = BandLu::<Complex64>::factor_shifted(&a, -1.0, s).unwrap();
        let b: Vec<Complex64> = (0..12).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let x = lu.solve(&b);
        let xt = lu.solve_transpose(&b);
        let d = a.to_dense();
        for i in 0..12 {
            let mut r = s * x[i];
            let mut rt = s * xt[i];
            for j in 0..12 {
                r -= d[i][j] * x[j];
                rt -= d[j][i] * xt[j];
            }
            assert!((r - b[i]).norm() < 1e-10);
            assert!((rt - b[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(BandLu::<f64>::factor_shifted(&a, 1.0, 0.0), Err(Error::SingularMatrix { .. })));
    }
}
