use faer::Mat;

use super::dense::{expm, phi1_times};
use super::{dot, norm2, orthonormalize_against};

/// Shift-and-invert (rational) Krylov space `span{v, Rv, R^2 v, ...}` with
/// `R = (I + gamma A)^{-1}`, used to approximate `exp(-tA) v` uniformly in
/// `t >= 0` for stiff `A` through the compression `H = V^T A V`.
#[derive(Debug, Clone)]
pub struct ResolventKrylov {
    basis: Vec<Vec<f64>>,
    h: Mat<f64>,
    beta: f64,
}

impl ResolventKrylov {
    /// `filter` is applied to every new direction before orthogonalization
    /// (e.g. a spectral projection keeping the space inside an invariant
    /// subspace). Stops early on breakdown.
    pub fn build(
        v: &[f64],
        k: usize,
        apply: impl Fn(&[f64]) -> Vec<f64>,
        resolve: impl Fn(&[f64]) -> Vec<f64>,
        filter: impl Fn(&mut Vec<f64>),
    ) -> Self {
        let beta = norm2(v);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        if beta > 0.0 {
            basis.push(v.iter().map(|x| x / beta).collect());
            while basis.len() < k {
                let mut w = resolve(basis.last().unwrap());
                filter(&mut w);
                let before = norm2(&w);
                let after = orthonormalize_against(&basis, &mut w);
                if !(after > 1e-12 * before) {
                    break;
                }
                basis.push(w);
            }
        }
        let kk = basis.len();
        let av: Vec<Vec<f64>> = basis.iter().map(|q| apply(q)).collect();
        let h = Mat::from_fn(kk, kk, |i, j| dot(&basis[i], &av[j]));
        ResolventKrylov { basis, h, beta }
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// The compressed operator `V^T A V`.
    pub fn compressed(&self) -> &Mat<f64> {
        &self.h
    }

    /// Coefficients of `exp(-tA) v` in the Krylov basis.
    pub fn exp_coeffs(&self, t: f64) -> Vec<f64> {
        let k = self.dim();
        if k == 0 {
            return Vec::new();
        }
        let e = expm(&Mat::from_fn(k, k, |i, j| -t * self.h[(i, j)]));
        (0..k).map(|i| self.beta * e[(i, 0)]).collect()
    }

    pub fn exp_action(&self, t: f64) -> Vec<f64> {
        self.lift(&self.exp_coeffs(t))
    }

    /// `phi_1(-tA) v`.
    pub fn phi1_action(&self, t: f64) -> Vec<f64> {
        let k = self.dim();
        if k == 0 {
            return Vec::new();
        }
        let a = Mat::from_fn(k, k, |i, j| -t * self.h[(i, j)]);
        let mut e1 = vec![0.0; k];
        e1[0] = self.beta;
        self.lift(&phi1_times(&a, &e1))
    }

    /// Maps basis coefficients back to the full space.
    pub fn lift(&self, c: &[f64]) -> Vec<f64> {
        let n = self.basis.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        for (q, ci) in self.basis.iter().zip(c) {
            for (o, qi) in out.iter_mut().zip(q) {
                *o += ci * qi;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{BandLu, CsrMatrix};

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let h = 1.0 / (n + 1) as f64;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 / (h * h)));
            if i > 0 {
                t.push((i, i - 1, -1.0 / (h * h)));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0 / (h * h)));
            }
        }
        CsrMatrix::from_triplets(n, n, t)
    }

    #[test]
    fn exp_action_on_eigenvector_is_exact() {
        let n = 80;
        let a = laplacian_1d(n);
        let h = 1.0 / (n + 1) as f64;
        let v: Vec<f64> = (1..=n).map(|i| (std::f64::consts::PI * i as f64 * h).sin()).collect();
        let lam = 4.0 / (h * h) * (std::f64::consts::PI * h / 2.0).sin().powi(2);
        let gamma = 0.01;
        let lu = BandLu::<f64>::factor_shifted(&a, gamma, 1.0).unwrap();
        let kr = ResolventKrylov::build(&v, 10, |x| a.mul_vec(x), |x| lu.solve(x), |_| {});
        assert_eq!(kr.dim(), 1);
        for t in [0.0, 0.01, 0.3] {
            let u = kr.exp_action(t);
            for i in 0..n {
                assert!((u[i] - (-lam * t).exp() * v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exp_action_matches_fine_time_stepping() {
        let n = 60;
        let a = laplacian_1d(n);
        let v: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let lu = BandLu::<f64>::factor_shifted(&a, 0.005, 1.0).unwrap();
        let kr = ResolventKrylov::build(&v, 24, |x| a.mul_vec(x), |x| lu.solve(x), |_| {});
        let t = 0.02;
        // reference: Crank-Nicolson with many tiny steps
        let steps = 4000;
        let dt = t / steps as f64;
        let cn = BandLu::<f64>::factor_shifted(&a, dt / 2.0, 1.0).unwrap();
        let mut u = v.clone();
        for _ in 0..steps {
            let au = a.mul_vec(&u);
            let rhs: Vec<f64> = u.iter().zip(&au).map(|(x, y)| x - dt / 2.0 * y).collect();
            u = cn.solve(&rhs);
        }
        let k = kr.exp_action(t);
        let err = norm2(&crate::linalg::sub(&k, &u)) / norm2(&u);
        assert!(err < 1e-5, "relative error {err}");
    }
}
