//! Rightmost spectrum of `-A`, its classification into stable, centre and
//! unstable parts, and the associated spectral projections.
//!
//! Eigenvalues come from a block Krylov iteration on the shift-inverted
//! operator `(-A - sigma)^{-1}`, refined cluster by cluster with block
//! inverse iteration. Left eigenvectors are obtained from transposed solves
//! with the same factorization and normalized against the right ones with
//! the bilinear pairing `l^T r = 1`, so that a spectral projection is the
//! finite expansion `sum_j r_j l_j^T`.

use faer::{c64, Mat};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::DomainMask;
use crate::linalg::{
    cdot, cnorm2, corthonormalize_against, dot, eig, eig_complex, mat_from_columns, min_max_singular_values,
    norm2, orthonormalize_against, solve_complex, symmetric_eig, BandLu, CsrMatrix,
};
use crate::operators::EllipticOperator;
use crate::{Error, Result};

/// An eigenvalue of `-A` with right and left eigenvectors.
///
/// `right` has unit Euclidean norm and `left^T right = 1`. Residuals are
/// `|(-A - value) x| / |x|` for the right and `|(-A^T - value) y| / |y|` for
/// the left vector.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex64,
    pub right: Vec<Complex64>,
    pub left: Vec<Complex64>,
    pub residual: f64,
    pub left_residual: f64,
}

impl EigenPair {
    /// `|l^T r| / (|l| |r|)`; zero for a defective eigenvalue.
    pub fn pairing_cosine(&self) -> f64 {
        cdot(&self.left, &self.right).norm() / (cnorm2(&self.left) * cnorm2(&self.right))
    }

    pub fn is_real(&self) -> bool {
        self.value.im == 0.0
    }

    fn conjugate(&self) -> EigenPair {
        EigenPair {
            value: self.value.conj(),
            right: self.right.iter().map(|z| z.conj()).collect(),
            left: self.left.iter().map(|z| z.conj()).collect(),
            residual: self.residual,
            left_residual: self.left_residual,
        }
    }
}

/// Controls for [`rightmost_eigs_with`].
#[derive(Debug, Clone)]
pub struct EigenOptions {
    /// Real shift `sigma`; defaults to `lambda_0 + 1`, right of the spectrum.
    pub shift: Option<f64>,
    /// Residual target for both eigenvectors.
    pub tol: f64,
    pub max_restarts: usize,
    /// Largest dimension for which the dense fallback is allowed.
    pub dense_limit: usize,
    pub block: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions { shift: None, tol: 1e-8, max_restarts: 4, dense_limit: 1500, block: 4, seed: 0x5eed_0001 }
    }
}

/// The `k` eigenvalues of `-A` with largest real part, with default options.
pub fn rightmost_eigs(op: &EllipticOperator, k: usize, shift: Option<f64>) -> Result<Vec<EigenPair>> {
    rightmost_eigs_with(op, k, &EigenOptions { shift, ..EigenOptions::default() })
}

type Guess = (Complex64, Vec<Complex64>);

pub fn rightmost_eigs_with(op: &EllipticOperator, k: usize, opts: &EigenOptions) -> Result<Vec<EigenPair>> {
    let a = op.matrix();
    let n = a.nrows();
    if k == 0 {
        return Ok(Vec::new());
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best_residuals = Vec::new();

    if n <= 3 * opts.block.max(1) + 2 * k + 16 {
        let guesses = dense_guesses(a, k)?;
        return polish(a, guesses, opts.tol).map(|p| finalize(p, k));
    }

    let (sigma, lu) = factor_shift(a, opts.shift.unwrap_or(op.lambda0() + 1.0))?;
    let mut p = (2 * k + 16).max(40).min(n);
    let mut start: Vec<Vec<f64>> = (0..opts.block.max(1)).map(|_| random_vec(&mut rng, n)).collect();
    for _ in 0..=opts.max_restarts {
        let ritz = shift_invert_ritz(a, &lu, sigma, &start, p, &mut rng)?;
        let chosen = select_nearest(ritz, k);
        best_residuals = chosen.iter().map(|(l, x)| residual(a, *l, x)).collect();
        let rough = chosen.iter().zip(&best_residuals).all(|((l, _), r)| *r <= 1e-4 * (1.0 + l.norm()));
        if rough {
            match polish(a, chosen.clone(), opts.tol) {
                Ok(pairs) => return Ok(finalize(pairs, k)),
                Err(Error::EigenNonConvergence { residuals }) => best_residuals = residuals,
                Err(e) => return Err(e),
            }
        }
        start = realified_columns(&chosen);
        start.push(random_vec(&mut rng, n));
        p = (p * 3 / 2).min(n);
    }
    if n <= opts.dense_limit {
        log::warn!("Krylov eigensolver did not converge (n = {n}); using the dense fallback");
        let guesses = dense_guesses(a, k)?;
        return polish(a, guesses, opts.tol).map(|p| finalize(p, k));
    }
    Err(Error::EigenNonConvergence { residuals: best_residuals })
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// LU of `A + sigma I`, nudging `sigma` to the right when singular.
fn factor_shift(a: &CsrMatrix, sigma0: f64) -> Result<(f64, BandLu<f64>)> {
    let mut sigma = sigma0;
    let mut last = None;
    for attempt in 0..5 {
        match BandLu::<f64>::factor_shifted(a, 1.0, sigma) {
            Ok(lu) => return Ok((sigma, lu)),
            Err(e) => {
                log::warn!("shift {sigma} is (nearly) an eigenvalue, perturbing");
                last = Some(e);
                sigma += 1e-3 * (1.0 + sigma.abs()) * (attempt + 1) as f64;
            }
        }
    }
    Err(last.unwrap())
}

fn residual(a: &CsrMatrix, lambda: Complex64, x: &[Complex64]) -> f64 {
    let (re, im): (Vec<f64>, Vec<f64>) = x.iter().map(|z| (z.re, z.im)).unzip();
    let ar = a.mul_vec(&re);
    let ai = a.mul_vec(&im);
    let r: Vec<Complex64> =
        (0..x.len()).map(|i| Complex64::new(ar[i], ai[i]) + lambda * x[i]).collect();
    cnorm2(&r) / cnorm2(x)
}

fn residual_transpose(at: &CsrMatrix, lambda: Complex64, y: &[Complex64]) -> f64 {
    residual(at, lambda, y)
}

/// Block Arnoldi on `T = -(A + sigma I)^{-1}` followed by Rayleigh-Ritz.
fn shift_invert_ritz(
    a: &CsrMatrix,
    lu: &BandLu<f64>,
    sigma: f64,
    start: &[Vec<f64>],
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Complex64, Complex64, Vec<Complex64>)>> {
    let n = a.nrows();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut w: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut block: Vec<Vec<f64>> = Vec::new();
    for s in start {
        let mut v = s.clone();
        let mut basis = q.clone();
        basis.extend(block.iter().cloned());
        if orthonormalize_against(&basis, &mut v) > 1e-10 {
            block.push(v);
        }
    }
    while q.len() < p {
        if block.is_empty() {
            let mut v = random_vec(rng, n);
            orthonormalize_against(&q, &mut v);
            block.push(v);
        }
        let current = std::mem::take(&mut block);
        for v in &current {
            q.push(v.clone());
        }
        for v in &current {
            let mut t = lu.solve(v);
            t.iter_mut().for_each(|x| *x = -*x);
            w.push(t.clone());
            if q.len() + block.len() >= p {
                continue;
            }
            let mut basis = q.clone();
            basis.extend(block.iter().cloned());
            let before = norm2(&t);
            let after = orthonormalize_against(&basis, &mut t);
            if after > 1e-10 * before {
                block.push(t);
            } else {
                let mut r = random_vec(rng, n);
                orthonormalize_against(&basis, &mut r);
                block.push(r);
            }
        }
    }
    let m = q.len();
    let h = Mat::from_fn(m, m, |i, j| dot(&q[i], &w[j]));
    let (theta, y) = eig(&h)?;
    let mut out = Vec::with_capacity(m);
    for (idx, th) in theta.iter().enumerate() {
        if th.norm() == 0.0 {
            continue;
        }
        let lambda = Complex64::new(sigma, 0.0) + th.inv();
        let mut x = vec![Complex64::new(0.0, 0.0); n];
        for (j, qj) in q.iter().enumerate() {
            let c = y[(j, idx)];
            for (xi, qi) in x.iter_mut().zip(qj) {
                *xi += c * qi;
            }
        }
        let nx = cnorm2(&x);
        x.iter_mut().for_each(|z| *z /= nx);
        out.push((lambda, *th, x));
    }
    Ok(out)
}

/// Keeps the `k` Ritz pairs nearest the shift (largest `|theta|`), completing
/// conjugate pairs.
fn select_nearest(mut ritz: Vec<(Complex64, Complex64, Vec<Complex64>)>, k: usize) -> Vec<Guess> {
    ritz.sort_by(|a, b| b.1.norm().total_cmp(&a.1.norm()).then(b.0.im.total_cmp(&a.0.im)));
    let mut out: Vec<Guess> = Vec::new();
    let mut i = 0;
    while i < ritz.len() && out.len() < k {
        out.push((ritz[i].0, ritz[i].2.clone()));
        i += 1;
    }
    // do not split a conjugate pair at the cut
    if let Some(last) = out.last() {
        if last.0.im > 0.0 && i < ritz.len() && (ritz[i].0 - last.0.conj()).norm() <= 1e-6 * (1.0 + last.0.norm()) {
            out.push((ritz[i].0, ritz[i].2.clone()));
        }
    }
    out
}

fn realified_columns(guesses: &[Guess]) -> Vec<Vec<f64>> {
    let mut cols = Vec::new();
    for (l, x) in guesses {
        if l.im >= 0.0 {
            cols.push(x.iter().map(|z| z.re).collect());
            if l.im > 0.0 {
                cols.push(x.iter().map(|z| z.im).collect());
            }
        }
    }
    cols
}

/// Initial guesses from a dense eigendecomposition (small problems only).
fn dense_guesses(a: &CsrMatrix, k: usize) -> Result<Vec<Guess>> {
    let n = a.nrows();
    let dense = a.to_dense();
    let b = Mat::from_fn(n, n, |i, j| -dense[i][j]);
    let (vals, vecs) = eig(&b)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| vals[j].re.total_cmp(&vals[i].re).then(vals[j].im.total_cmp(&vals[i].im)));
    let mut take = k.min(n);
    if take < n && vals[idx[take - 1]].im > 0.0 {
        take += 1;
    }
    Ok(idx[..take]
        .iter()
        .map(|&i| {
            let mut x: Vec<Complex64> = (0..n).map(|r| vecs[(r, i)]).collect();
            let nx = cnorm2(&x);
            x.iter_mut().for_each(|z| *z /= nx);
            (vals[i], x)
        })
        .collect())
}

fn is_real_value(l: Complex64) -> bool {
    l.im.abs() <= 1e-8 * (1.0 + l.norm())
}

/// Refines guesses cluster by cluster and attaches left eigenvectors.
fn polish(a: &CsrMatrix, guesses: Vec<Guess>, tol: f64) -> Result<Vec<EigenPair>> {
    let at = a.transpose();
    // one representative per conjugate pair
    let reps: Vec<Guess> = guesses.into_iter().filter(|(l, _)| l.im >= 0.0 || is_real_value(*l)).collect();
    let clusters = cluster_indices(&reps.iter().map(|g| g.0).collect::<Vec<_>>());
    let mut pairs = Vec::new();
    for cl in clusters {
        let members: Vec<&Guess> = cl.iter().map(|&i| &reps[i]).collect();
        let got = if members.iter().all(|g| is_real_value(g.0)) {
            polish_real_cluster(a, &at, &members, tol)?
        } else {
            polish_complex_cluster(a, &at, &members, tol)?
        };
        for p in got {
            if p.value.im > 0.0 {
                let c = p.conjugate();
                pairs.push(p);
                pairs.push(c);
            } else {
                pairs.push(p);
            }
        }
    }
    for p in &pairs {
        let cos = p.pairing_cosine();
        if !(cos >= 1e-10) {
            return Err(Error::DefectiveEigenvalue { re: p.value.re, im: p.value.im, pairing: cos });
        }
    }
    let worst = pairs.iter().map(|p| p.residual.max(p.left_residual)).fold(0.0, f64::max);
    if !(worst <= tol) {
        return Err(Error::EigenNonConvergence {
            residuals: pairs.iter().map(|p| p.residual.max(p.left_residual)).collect(),
        });
    }
    Ok(pairs)
}

/// Groups values closer than `1e-3 (1 + |lambda|)` (transitively).
fn cluster_indices(values: &[Complex64]) -> Vec<Vec<usize>> {
    let n = values.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if (values[i] - values[j]).norm() <= 1e-3 * (1.0 + values[i].norm()) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri] = rj;
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_of[r] {
            Some(g) => groups[g].push(i),
            None => {
                root_of[r] = Some(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

fn orthonormal_block(vs: &mut Vec<Vec<f64>>, rng: &mut ChaCha8Rng) {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs.drain(..) {
        let mut v = v;
        let before = norm2(&v);
        if orthonormalize_against(&out, &mut v) <= 1e-12 * before.max(f64::MIN_POSITIVE) {
            v = random_vec(rng, v.len());
            orthonormalize_against(&out, &mut v);
        }
        out.push(v);
    }
    *vs = out;
}

fn corthonormal_block(vs: &mut Vec<Vec<Complex64>>, rng: &mut ChaCha8Rng) {
    let mut out: Vec<Vec<Complex64>> = Vec::with_capacity(vs.len());
    for v in vs.drain(..) {
        let mut v = v;
        let before = cnorm2(&v);
        if corthonormalize_against(&out, &mut v) <= 1e-12 * before.max(f64::MIN_POSITIVE) {
            v = random_vec(rng, v.len()).into_iter().map(|x| Complex64::new(x, 0.0)).collect();
            corthonormalize_against(&out, &mut v);
        }
        out.push(v);
    }
    *vs = out;
}

const POLISH_ITERS: usize = 8;

fn polish_real_cluster(a: &CsrMatrix, at: &CsrMatrix, members: &[&Guess], tol: f64) -> Result<Vec<EigenPair>> {
    let c = members.len();
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ c as u64);
    let mean = members.iter().map(|g| g.0.re).sum::<f64>() / c as f64;
    let mut lu = None;
    for attempt in 0..5 {
        let mu = mean + 1e-9 * (1.0 + mean.abs()) * 10f64.powi(attempt);
        if let Ok(f) = BandLu::<f64>::factor_shifted(a, -1.0, -mu) {
            lu = Some(f);
            break;
        }
    }
    let lu = lu.ok_or(Error::SingularMatrix { pivot: 0 })?;

    // real block spanning the guesses: phase-aligned real parts
    let mut y: Vec<Vec<f64>> = members
        .iter()
        .map(|(_, x)| {
            let k = (0..n).max_by(|&i, &j| x[i].norm().total_cmp(&x[j].norm())).unwrap();
            let ph = x[k].conj() / x[k].norm();
            x.iter().map(|z| (z * ph).re).collect()
        })
        .collect();
    orthonormal_block(&mut y, &mut rng);
    let mut vals = vec![0.0; c];
    let mut xs = y.clone();
    let mut res = vec![f64::INFINITY; c];
    for it in 0..POLISH_ITERS {
        if it > 0 || res.iter().any(|r| *r > tol) {
            for v in y.iter_mut() {
                lu.solve_in_place(v);
            }
            orthonormal_block(&mut y, &mut rng);
        }
        let ay: Vec<Vec<f64>> = y.iter().map(|v| a.mul_vec(v)).collect();
        let g = Mat::from_fn(c, c, |i, j| -dot(&y[i], &ay[j]));
        let asym = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max((g[(i, j)] - g[(j, i)]).abs()));
        let gnorm = (0..c).flat_map(|i| (0..c).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max(g[(i, j)].abs()));
        let (nu, z): (Vec<f64>, Mat<f64>) = if asym <= 1e-10 * gnorm.max(1e-300) {
            let gs = Mat::from_fn(c, c, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
            symmetric_eig(&gs)?
        } else {
            let (v, zc) = eig(&g)?;
            let zr = Mat::from_fn(c, c, |i, j| {
                let k = (0..c).max_by(|&p, &q| zc[(p, j)].norm().total_cmp(&zc[(q, j)].norm())).unwrap();
                let ph = zc[(k, j)].conj() / zc[(k, j)].norm();
                (zc[(i, j)] * ph).re
            });
            (v.iter().map(|l| l.re).collect(), zr)
        };
        vals = nu;
        xs = (0..c)
            .map(|j| {
                let mut x = vec![0.0; n];
                for (i, yi) in y.iter().enumerate() {
                    let zij = z[(i, j)];
                    for (xv, yv) in x.iter_mut().zip(yi) {
                        *xv += zij * yv;
                    }
                }
                let nx = norm2(&x);
                x.iter_mut().for_each(|v| *v /= nx);
                x
            })
            .collect();
        res = xs
            .iter()
            .zip(&vals)
            .map(|(x, l)| {
                let ax = a.mul_vec(x);
                let r: Vec<f64> = ax.iter().zip(x).map(|(p, q)| p + l * q).collect();
                norm2(&r)
            })
            .collect();
        if it >= 1 && res.iter().all(|r| *r <= 0.1 * tol) {
            break;
        }
    }

    // left vectors by transposed inverse iteration, made dual to `xs`
    let mut w = xs.clone();
    let mut lefts: Vec<Vec<f64>> = Vec::new();
    let mut lres = vec![f64::INFINITY; c];
    for _ in 0..POLISH_ITERS {
        for v in w.iter_mut() {
            lu.solve_transpose_in_place(v);
        }
        orthonormal_block(&mut w, &mut rng);
        let xtw = Mat::from_fn(c, c, |i, j| dot(&xs[i], &w[j]));
        let inv = crate::linalg::solve(&xtw, &Mat::<f64>::identity(c, c))?;
        lefts = (0..c)
            .map(|j| {
                let mut l = vec![0.0; n];
                for (i, wi) in w.iter().enumerate() {
                    let s = inv[(i, j)];
                    for (lv, wv) in l.iter_mut().zip(wi) {
                        *lv += s * wv;
                    }
                }
                l
            })
            .collect();
        lres = lefts
            .iter()
            .zip(&vals)
            .map(|(l, v)| {
                let al = at.mul_vec(l);
                let r: Vec<f64> = al.iter().zip(l).map(|(p, q)| p + v * q).collect();
                norm2(&r) / norm2(l)
            })
            .collect();
        if lres.iter().all(|r| *r <= 0.1 * tol) {
            break;
        }
    }
    let _ = residual_transpose;
    let cplx = |v: &[f64]| v.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>();
    Ok((0..c)
        .map(|j| EigenPair {
            value: Complex64::new(vals[j], 0.0),
            right: cplx(&xs[j]),
            left: cplx(&lefts[j]),
            residual: res[j],
            left_residual: lres[j],
        })
        .collect())
}

fn polish_complex_cluster(a: &CsrMatrix, at: &CsrMatrix, members: &[&Guess], tol: f64) -> Result<Vec<EigenPair>> {
    let c = members.len();
    let n = a.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7f4a_7c15 ^ c as u64);
    let mean = members.iter().map(|g| g.0).sum::<Complex64>() / c as f64;
    let mut lu = None;
    for attempt in 0..5 {
        let mu = mean + 1e-9 * (1.0 + mean.norm()) * 10f64.powi(attempt);
        if let Ok(f) = BandLu::<Complex64>::factor_shifted(a, -1.0, -mu) {
            lu = Some(f);
            break;
        }
    }
    let lu = lu.ok_or(Error::SingularMatrix { pivot: 0 })?;
    let mut y: Vec<Vec<Complex64>> = members.iter().map(|g| g.1.clone()).collect();
    corthonormal_block(&mut y, &mut rng);
    let mut vals = vec![Complex64::new(0.0, 0.0); c];
    let mut xs = y.clone();
    let mut res = vec![f64::INFINITY; c];
    let apply_c = |m: &CsrMatrix, v: &[Complex64]| -> Vec<Complex64> {
        let (re, im): (Vec<f64>, Vec<f64>) = v.iter().map(|z| (z.re, z.im)).unzip();
        let (ar, ai) = (m.mul_vec(&re), m.mul_vec(&im));
        ar.into_iter().zip(ai).map(|(r, i)| Complex64::new(r, i)).collect()
    };
    for it in 0..POLISH_ITERS {
        if it > 0 || res.iter().any(|r| *r > tol) {
            for v in y.iter_mut() {
                lu.solve_in_place(v);
            }
            corthonormal_block(&mut y, &mut rng);
        }
        let ay: Vec<Vec<Complex64>> = y.iter().map(|v| apply_c(a, v)).collect();
        let g = Mat::<c64>::from_fn(c, c, |i, j| -crate::linalg::cdotc(&y[i], &ay[j]));
        let (nu, z) = eig_complex(&g)?;
        vals = nu;
        xs = (0..c)
            .map(|j| {
                let mut x = vec![Complex64::new(0.0, 0.0); n];
                for (i, yi) in y.iter().enumerate() {
                    let zij = z[(i, j)];
                    for (xv, yv) in x.iter_mut().zip(yi) {
                        *xv += zij * yv;
                    }
                }
                let nx = cnorm2(&x);
                x.iter_mut().for_each(|v| *v /= nx);
                x
            })
            .collect();
        res = xs.iter().zip(&vals).map(|(x, l)| residual(a, *l, x)).collect();
        if it >= 1 && res.iter().all(|r| *r <= 0.1 * tol) {
            break;
        }
    }
    let mut w = xs.clone();
    let mut lefts: Vec<Vec<Complex64>> = Vec::new();
    let mut lres = vec![f64::INFINITY; c];
    for _ in 0..POLISH_ITERS {
        for v in w.iter_mut() {
            lu.solve_transpose_in_place(v);
        }
        corthonormal_block(&mut w, &mut rng);
        let xtw = Mat::<c64>::from_fn(c, c, |i, j| cdot(&xs[i], &w[j]));
        let inv = solve_complex(&xtw, &Mat::<c64>::identity(c, c));
        lefts = (0..c)
            .map(|j| {
                let mut l = vec![Complex64::new(0.0, 0.0); n];
                for (i, wi) in w.iter().enumerate() {
                    let s = inv[(i, j)];
                    for (lv, wv) in l.iter_mut().zip(wi) {
                        *lv += s * wv;
                    }
                }
                l
            })
            .collect();
        lres = lefts.iter().zip(&vals).map(|(l, v)| residual(at, *v, l)).collect();
        if lres.iter().all(|r| *r <= 0.1 * tol) {
            break;
        }
    }
    let mut out = Vec::with_capacity(c);
    for j in 0..c {
        let mut p = EigenPair {
            value: vals[j],
            right: xs[j].clone(),
            left: lefts[j].clone(),
            residual: res[j],
            left_residual: lres[j],
        };
        if is_real_value(p.value) {
            // a real member of a mixed cluster: rotate to a real vector
            let k = (0..n).max_by(|&i, &q| p.right[i].norm().total_cmp(&p.right[q].norm())).unwrap();
            let ph = p.right[k].conj() / p.right[k].norm();
            p.right.iter_mut().for_each(|z| *z = Complex64::new((*z * ph).re, 0.0));
            p.left.iter_mut().for_each(|z| *z = Complex64::new((*z / ph).re, 0.0));
            p.value = Complex64::new(p.value.re, 0.0);
            let s = cdot(&p.left, &p.right);
            p.left.iter_mut().for_each(|z| *z /= s);
            p.residual = residual(a, p.value, &p.right);
            p.left_residual = residual(at, p.value, &p.left);
        } else if p.value.im < 0.0 {
            p = p.conjugate();
        }
        out.push(p);
    }
    Ok(out)
}

/// Sorts by real part (descending, ties by imaginary part) and keeps `k`,
/// never splitting a conjugate pair.
fn finalize(mut pairs: Vec<EigenPair>, k: usize) -> Vec<EigenPair> {
    pairs.sort_by(|a, b| b.value.re.total_cmp(&a.value.re).then(b.value.im.total_cmp(&a.value.im)));
    let mut keep = k.min(pairs.len());
    if keep < pairs.len() && keep > 0 && pairs[keep - 1].value.im > 0.0 {
        keep += 1;
    }
    pairs.truncate(keep);
    pairs
}

/// Which part of the spectrum is split off as `X^+`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    /// `X^- = X^s`, `X^+ = X^c + X^u` (local stable manifold).
    Stable,
    /// `X^- = X^s + X^c`, `X^+ = X^u` (local unstable manifold).
    Unstable,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Stable => "stable",
            SplitKind::Unstable => "unstable",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stable" => Ok(SplitKind::Stable),
            "unstable" => Ok(SplitKind::Unstable),
            other => Err(Error::Parse(format!("unknown split kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EigenClass {
    Stable,
    Centre,
    Unstable,
}

impl EigenClass {
    pub fn name(self) -> &'static str {
        match self {
            EigenClass::Stable => "s",
            EigenClass::Centre => "c",
            EigenClass::Unstable => "u",
        }
    }
}

/// Computed eigenvalues sorted into `sigma^s`, `sigma^c`, `sigma^u`.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    pub sigma_s: Vec<EigenPair>,
    pub sigma_c: Vec<EigenPair>,
    pub sigma_u: Vec<EigenPair>,
    pub hyperbolic: bool,
    pub tau_c: f64,
    /// Smallest `|Re lambda|` over the computed eigenvalues.
    pub gap: f64,
    /// `dim X^u`.
    pub d: usize,
}

impl SpectralSplit {
    /// All computed eigenvalues in descending real part with their class.
    pub fn classified(&self) -> Vec<(&EigenPair, EigenClass)> {
        let mut all: Vec<(&EigenPair, EigenClass)> = self
            .sigma_u
            .iter()
            .map(|p| (p, EigenClass::Unstable))
            .chain(self.sigma_c.iter().map(|p| (p, EigenClass::Centre)))
            .chain(self.sigma_s.iter().map(|p| (p, EigenClass::Stable)))
            .collect();
        all.sort_by(|a, b| b.0.value.re.total_cmp(&a.0.value.re).then(b.0.value.im.total_cmp(&a.0.value.im)));
        all
    }

    pub fn values(&self) -> Vec<Complex64> {
        self.classified().iter().map(|(p, _)| p.value).collect()
    }

    /// `dim X^+` for the given split.
    pub fn dim_plus(&self, kind: SplitKind) -> usize {
        match kind {
            SplitKind::Stable => self.sigma_u.len() + self.sigma_c.len(),
            SplitKind::Unstable => self.sigma_u.len(),
        }
    }

    /// Largest real part among the computed stable eigenvalues.
    pub fn top_stable(&self) -> Option<f64> {
        self.sigma_s.iter().map(|p| p.value.re).max_by(f64::total_cmp)
    }

    /// Smallest real part among the unstable eigenvalues.
    pub fn min_unstable(&self) -> Option<f64> {
        self.sigma_u.iter().map(|p| p.value.re).min_by(f64::total_cmp)
    }
}

/// Sorts eigenvalues by the sign of their real part, `|Re| <= tau_c` being centre.
pub fn classify(eigs: Vec<EigenPair>, tau_c: f64) -> SpectralSplit {
    let gap = eigs.iter().map(|p| p.value.re.abs()).fold(f64::INFINITY, f64::min);
    let mut split = SpectralSplit {
        sigma_s: Vec::new(),
        sigma_c: Vec::new(),
        sigma_u: Vec::new(),
        hyperbolic: true,
        tau_c,
        gap,
        d: 0,
    };
    for p in eigs {
        if p.value.re.abs() <= tau_c {
            split.sigma_c.push(p);
        } else if p.value.re > 0.0 {
            split.sigma_u.push(p);
        } else {
            split.sigma_s.push(p);
        }
    }
    split.hyperbolic = split.sigma_c.is_empty();
    split.d = split.sigma_u.len();
    split
}

/// Options for [`compute_split`].
#[derive(Debug, Clone)]
pub struct SplitOptions {
    pub eigen: EigenOptions,
    /// `tau_c = tau_rel * (spectral radius bound)`.
    pub tau_rel: f64,
    pub k_start: usize,
    /// Stable eigenvalues computed beyond `dim X^u`.
    pub extra: usize,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions { eigen: EigenOptions::default(), tau_rel: 1e-8, k_start: 6, extra: 6 }
    }
}

/// Computes and classifies the rightmost spectrum, growing the number of
/// eigenvalues until at least `extra` computed values lie beyond `dim X^u`
/// and the last one is clearly stable (`Re < -10 tau_c`).
pub fn compute_split(op: &EllipticOperator, opts: &SplitOptions) -> Result<SpectralSplit> {
    let tau_c = opts.tau_rel * op.spectral_radius_bound();
    let n = op.dim();
    let mut k = opts.k_start.max(1);
    loop {
        let eigs = rightmost_eigs_with(op, k, &opts.eigen)?;
        let tail = eigs.iter().map(|p| p.value.re).fold(f64::INFINITY, f64::min);
        let split = classify(eigs, tau_c);
        let need = split.sigma_u.len() + split.sigma_c.len() + opts.extra;
        if (k >= need && tail < -10.0 * tau_c) || k >= n {
            return Ok(split);
        }
        k = need.max(k + opts.extra).min(n);
    }
}

/// Spectral projection onto `X^+` in factored form `P^+ = sum_j r_j l_j^T`
/// with real vectors (conjugate pairs realified into two-dimensional blocks).
/// `P^- = I - P^+`.
#[derive(Debug, Clone)]
pub struct Projector {
    kind: SplitKind,
    mask: DomainMask,
    right: Vec<Vec<f64>>,
    left: Vec<Vec<f64>>,
    values: Vec<Complex64>,
    norm_plus: f64,
    norm_minus: f64,
    idempotency_residual: f64,
    commutation_residual: f64,
}

/// Builds `P^+` for a hyperbolic split. Right vectors are scaled to unit
/// `L^2` norm.
pub fn build_projector(split: &SpectralSplit, kind: SplitKind, op: &EllipticOperator) -> Result<Projector> {
    if !split.hyperbolic {
        return Err(Error::NotHyperbolic { count: split.sigma_c.len(), tau_c: split.tau_c });
    }
    let plus: Vec<&EigenPair> = match kind {
        SplitKind::Stable => split.sigma_u.iter().chain(split.sigma_c.iter()).collect(),
        SplitKind::Unstable => split.sigma_u.iter().collect(),
    };
    let mask = op.mask();
    let h = mask.grid().h();
    let mut right = Vec::new();
    let mut left = Vec::new();
    let mut values = Vec::new();
    for p in &plus {
        let cos = p.pairing_cosine();
        if !(cos >= 1e-10) {
            return Err(Error::DefectiveEigenvalue { re: p.value.re, im: p.value.im, pairing: cos });
        }
        if p.value.im < 0.0 {
            continue;
        }
        // unit L^2 norm: |r|_2 = 1 / h
        let s = 1.0 / (h * cnorm2(&p.right));
        let r: Vec<Complex64> = p.right.iter().map(|z| z * s).collect();
        let pairing = cdot(&p.left, &r);
        let l: Vec<Complex64> = p.left.iter().map(|z| z / pairing).collect();
        if p.value.im == 0.0 {
            right.push(r.iter().map(|z| z.re).collect());
            left.push(l.iter().map(|z| z.re).collect());
            values.push(p.value);
        } else {
            right.push(r.iter().map(|z| z.re).collect());
            right.push(r.iter().map(|z| z.im).collect());
            left.push(l.iter().map(|z| 2.0 * z.re).collect());
            left.push(l.iter().map(|z| -2.0 * z.im).collect());
            values.push(p.value);
            values.push(p.value.conj());
        }
    }
    let mut proj = Projector {
        kind,
        mask: mask.clone(),
        right,
        left,
        values,
        norm_plus: 0.0,
        norm_minus: 1.0,
        idempotency_residual: 0.0,
        commutation_residual: 0.0,
    };
    proj.norm_plus = factored_norm(&proj.right, &proj.left);
    proj.norm_minus = if proj.d() == 0 {
        1.0
    } else if proj.d() == mask.count() {
        0.0
    } else {
        // a projector and its complement have equal norm when both are nontrivial
        proj.norm_plus
    };
    let (idem, comm) = proj.residuals(op, 50, 0x70_4a);
    proj.idempotency_residual = idem;
    proj.commutation_residual = comm;
    if idem > 1e-6 || comm > 1e-6 {
        log::warn!("projector residuals: idempotency {idem:.2e}, commutation {comm:.2e}");
    }
    Ok(proj)
}

/// `|| sum_j a_j b_j^T ||_2` through thin QR factors of both sides.
fn factored_norm(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let ra = r_factor(a);
    let rb = r_factor(b);
    let k = a.len();
    let prod = Mat::from_fn(ra.nrows(), rb.nrows(), |i, j| (0..k).map(|l| ra[(i, l)] * rb[(j, l)]).sum());
    min_max_singular_values(&prod).1
}

fn r_factor(cols: &[Vec<f64>]) -> Mat<f64> {
    let m = mat_from_columns(cols);
    m.qr().thin_R().to_owned()
}

impl Projector {
    pub fn kind(&self) -> SplitKind {
        self.kind
    }

    pub fn mask(&self) -> &DomainMask {
        &self.mask
    }

    /// `dim X^+` (rank of `P^+`).
    pub fn d(&self) -> usize {
        self.right.len()
    }

    /// Realified right vectors spanning `X^+`.
    pub fn right(&self) -> &[Vec<f64>] {
        &self.right
    }

    /// Realified dual vectors, `left_i^T right_j = delta_ij`.
    pub fn left(&self) -> &[Vec<f64>] {
        &self.left
    }

    /// Eigenvalues in `X^+` (conjugates included).
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn norm_plus(&self) -> f64 {
        self.norm_plus
    }

    pub fn norm_minus(&self) -> f64 {
        self.norm_minus
    }

    pub fn idempotency_residual(&self) -> f64 {
        self.idempotency_residual
    }

    pub fn commutation_residual(&self) -> f64 {
        self.commutation_residual
    }

    /// `(l_j^T u)_j`.
    pub fn coords(&self, u: &[f64]) -> Vec<f64> {
        self.left.iter().map(|l| dot(l, u)).collect()
    }

    /// `sum_j c_j r_j`.
    pub fn combine(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.count()];
        for (r, cj) in self.right.iter().zip(c) {
            for (o, ri) in out.iter_mut().zip(r) {
                *o += cj * ri;
            }
        }
        out
    }

    pub fn plus(&self, u: &[f64]) -> Vec<f64> {
        self.combine(&self.coords(u))
    }

    pub fn minus(&self, u: &[f64]) -> Vec<f64> {
        let p = self.plus(u);
        u.iter().zip(&p).map(|(a, b)| a - b).collect()
    }

    /// Matrix of `-A` restricted to `X^+` in the right-vector basis,
    /// `L^T (-A R)`.
    pub fn reduced_matrix(&self, op: &EllipticOperator) -> Mat<f64> {
        let d = self.d();
        let ar: Vec<Vec<f64>> = self.right.iter().map(|r| op.matrix().mul_vec(r)).collect();
        Mat::from_fn(d, d, |i, j| -dot(&self.left[i], &ar[j]))
    }

    /// Largest `|P(Pv) - Pv| / |v|` and `|APv - PAv| / |v|` over random `v`.
    pub fn residuals(&self, op: &EllipticOperator, samples: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.mask.count();
        let mut idem: f64 = 0.0;
        let mut comm: f64 = 0.0;
        for _ in 0..samples {
            let v = random_vec(&mut rng, n);
            let nv = norm2(&v);
            let pv = self.plus(&v);
            let ppv = self.plus(&pv);
            idem = idem.max(norm2(&crate::linalg::sub(&ppv, &pv)) / nv);
            let apv = op.matrix().mul_vec(&pv);
            let pav = self.plus(&op.matrix().mul_vec(&v));
            comm = comm.max(norm2(&crate::linalg::sub(&apv, &pav)) / nv);
        }
        (idem, comm)
    }
}

/// Basis of `X^+` with a conditioning measure.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub mask: DomainMask,
    pub vectors: Vec<Vec<f64>>,
    pub conditioning: f64,
}

impl SubspaceBasis {
    /// The realified eigenvector basis of a projector.
    pub fn from_projector(p: &Projector) -> Self {
        let (smin, smax) = if p.d() == 0 { (1.0, 1.0) } else { min_max_singular_values(&mat_from_columns(p.right())) };
        SubspaceBasis { mask: p.mask().clone(), vectors: p.right().to_vec(), conditioning: smin / smax }
    }

    pub fn d(&self) -> usize {
        self.vectors.len()
    }

    pub fn combine(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.count()];
        for (f, cj) in self.vectors.iter().zip(c) {
            for (o, fi) in out.iter_mut().zip(f) {
                *o += cj * fi;
            }
        }
        out
    }
}

/// Default lower bound on the conditioning of pushed-forward bases.
pub const CONDITIONING_MIN: f64 = 1e-6;

/// `f_{j,n} = P_n^+ (f_j restricted to Omega_n)`, with conditioning
/// `sigma_min(F_n) / sigma_max(F)`.
pub fn pushforward_basis(f: &SubspaceBasis, proj_n: &Projector, c_min: f64) -> Result<SubspaceBasis> {
    let mask_n = proj_n.mask();
    if f.mask.grid() != mask_n.grid() {
        return Err(Error::GridMismatch { left: f.mask.grid().to_string(), right: mask_n.grid().to_string() });
    }
    if f.d() != proj_n.d() {
        return Err(Error::DimensionMismatch { expected: f.d(), got: proj_n.d() });
    }
    let vectors: Vec<Vec<f64>> =
        f.vectors.iter().map(|v| mask_n.restrict_from(v, &f.mask).map(|r| proj_n.plus(&r))).collect::<Result<_>>()?;
    let conditioning = if f.d() == 0 {
        1.0
    } else {
        let smax = min_max_singular_values(&mat_from_columns(&f.vectors)).1;
        let smin = min_max_singular_values(&mat_from_columns(&vectors)).0;
        smin / smax
    };
    if !(conditioning >= c_min) {
        return Err(Error::ConditioningCollapse { conditioning, threshold: c_min });
    }
    Ok(SubspaceBasis { mask: mask_n.clone(), vectors, conditioning })
}

/// `|| E_n P_n^+ R_n - E P^+ R ||` on `L^2(D)`, as the largest singular value
/// of the factored difference.
pub fn projector_gap(proj_n: &Projector, proj: &Projector) -> Result<f64> {
    if proj_n.mask().grid() != proj.mask().grid() {
        return Err(Error::GridMismatch {
            left: proj_n.mask().grid().to_string(),
            right: proj.mask().grid().to_string(),
        });
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (r, l) in proj_n.right().iter().zip(proj_n.left()) {
        a.push(proj_n.mask().extend_by_zero(r)?);
        b.push(proj_n.mask().extend_by_zero(l)?);
    }
    for (r, l) in proj.right().iter().zip(proj.left()) {
        a.push(proj.mask().extend_by_zero(r)?.into_iter().map(|x| -x).collect());
        b.push(proj.mask().extend_by_zero(l)?);
    }
    Ok(factored_norm(&a, &b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::operators::{assemble, CoefficientSpec};
    use std::f64::consts::PI;

    fn op(m: usize, spec: CoefficientSpec) -> EllipticOperator {
        let g = GridSpec::unit(m).unwrap();
        assemble(&DomainMask::full(g), &spec.sample(&g)).unwrap()
    }

    fn discrete(m: usize, j: usize, k: usize) -> f64 {
        let h = 1.0 / (m + 1) as f64;
        let s = |q: usize| 4.0 / (h * h) * (q as f64 * PI * h / 2.0).sin().powi(2);
        s(j) + s(k)
    }

    #[test]
    fn laplacian_spectrum_matches_discrete_formula() {
        let m = 31;
        let o = op(m, CoefficientSpec::laplacian(0.0));
        let eigs = rightmost_eigs(&o, 6, None).unwrap();
        let mut expect = vec![
            discrete(m, 1, 1),
            discrete(m, 1, 2),
            discrete(m, 2, 1),
            discrete(m, 2, 2),
            discrete(m, 1, 3),
            discrete(m, 3, 1),
        ];
        expect.sort_by(f64::total_cmp);
        for (p, e) in eigs.iter().zip(&expect) {
            assert!((p.value.re + e).abs() < 1e-8 * e, "{} vs {}", p.value.re, -e);
            assert_eq!(p.value.im, 0.0);
            assert!(p.residual <= 1e-8 && p.left_residual <= 1e-8);
        }
        // symmetric: left is a multiple of right
        for p in &eigs {
            assert!((p.pairing_cosine() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn shifted_laplacian_split() {
        let o = op(31, CoefficientSpec::laplacian(-30.0));
        let split = compute_split(&o, &SplitOptions::default()).unwrap();
        assert!(split.hyperbolic);
        assert_eq!(split.d, 1);
        let lu = split.sigma_u[0].value.re;
        assert!((lu - (30.0 - discrete(31, 1, 1))).abs() < 1e-8);
        let p = build_projector(&split, SplitKind::Unstable, &o).unwrap();
        assert_eq!(p.d(), 1);
        assert!((p.norm_plus() - 1.0).abs() < 1e-8);
        assert!(p.idempotency_residual() < 1e-10 && p.commutation_residual() < 1e-6);
        // the range is the discrete first eigenfunction
        let g = o.mask().grid();
        let phi = o.mask().sample(|x, y| (PI * x).sin() * (PI * y).sin());
        let nphi = g.l2_norm(&phi);
        let r = &p.right()[0];
        let c = g.l2_dot(r, &phi) / nphi;
        assert!((c.abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn classify_examples() {
        let mk = |v: f64| EigenPair {
            value: Complex64::new(v, 0.0),
            right: vec![Complex64::new(1.0, 0.0)],
            left: vec![Complex64::new(1.0, 0.0)],
            residual: 0.0,
            left_residual: 0.0,
        };
        let s = classify(vec![mk(-1.0), mk(-5.0), mk(2.0)], 1e-8);
        assert_eq!((s.sigma_s.len(), s.sigma_u.len(), s.sigma_c.len()), (2, 1, 0));
        assert!(s.hyperbolic && s.d == 1 && s.gap == 1.0);
        let s = classify(vec![mk(0.0), mk(-1.0)], 1e-8);
        assert!(!s.hyperbolic && s.sigma_c.len() == 1);
    }

    #[test]
    fn trivial_projector_when_all_stable() {
        let o = op(15, CoefficientSpec::laplacian(0.0));
        let split = compute_split(&o, &SplitOptions::default()).unwrap();
        let p = build_projector(&split, SplitKind::Unstable, &o).unwrap();
        assert_eq!(p.d(), 0);
        assert_eq!((p.norm_plus(), p.norm_minus()), (0.0, 1.0));
        let v = vec![1.0; o.dim()];
        assert_eq!(p.minus(&v), v);
    }

    #[test]
    fn non_normal_operator_projector() {
        // strong advection: left and right vectors differ
        let mut spec = CoefficientSpec::anisotropic(-60.0, 1.0);
        spec.advection = [crate::operators::ScalarField::constant(6.0), crate::operators::ScalarField::constant(-4.0)];
        let o = op(23, spec);
        let split = compute_split(&o, &SplitOptions::default()).unwrap();
        assert!(split.d >= 1);
        let p = build_projector(&split, SplitKind::Unstable, &o).unwrap();
        assert!(p.idempotency_residual() < 1e-8, "{}", p.idempotency_residual());
        assert!(p.commutation_residual() < 1e-6, "{}", p.commutation_residual());
        assert!(p.norm_plus() > 1.0);
        for (i, l) in p.left().iter().enumerate() {
            for (j, r) in p.right().iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(l, r) - expect).abs() < 1e-10);
            }
        }
        // projector on X^+ agrees with the reduced matrix eigenvalues
        let red = p.reduced_matrix(&o);
        let (vals, _) = eig(&red).unwrap();
        for v in vals {
            assert!(p.values().iter().any(|w| (v - w).norm() < 1e-6 * (1.0 + w.norm())));
        }
    }

    #[test]
    fn complex_eigenvalues_are_paired_and_realified() {
        // a rotating drift field produces complex eigenvalues
        let mut spec = CoefficientSpec::laplacian(0.0);
        spec.advection = [
            crate::operators::ScalarField::Affine { value: 40.0, gx: 0.0, gy: -80.0 },
            crate::operators::ScalarField::Affine { value: -40.0, gx: 80.0, gy: 0.0 },
        ];
        let o = op(15, spec);
        let eigs = rightmost_eigs(&o, 8, None).unwrap();
        let dense = {
            let n = o.dim();
            let d = o.matrix().to_dense();
            let (v, _) = eig(&Mat::from_fn(n, n, |i, j| -d[i][j])).unwrap();
            let mut v = v;
            v.sort_by(|a, b| b.re.total_cmp(&a.re));
            v
        };
        for p in &eigs {
            assert!(p.residual <= 1e-8 && p.left_residual <= 1e-8);
            assert!(dense.iter().any(|w| (w - p.value).norm() < 1e-7 * (1.0 + w.norm())));
            if p.value.im != 0.0 {
                assert!(eigs.iter().any(|q| (q.value - p.value.conj()).norm() < 1e-12));
            }
        }
        assert!((eigs[0].value.re - dense[0].re).abs() < 1e-7 * (1.0 + dense[0].norm()));
    }

    #[test]
    fn projector_gap_examples() {
        let o = op(15, CoefficientSpec::laplacian(-40.0));
        let split = compute_split(&o, &SplitOptions::default()).unwrap();
        let p = build_projector(&split, SplitKind::Unstable, &o).unwrap();
        assert!(projector_gap(&p, &p).unwrap() < 1e-14);
        let base = SubspaceBasis::from_projector(&p);
        let pushed = pushforward_basis(&base, &p, CONDITIONING_MIN).unwrap();
        for (a, b) in pushed.vectors[0].iter().zip(&base.vectors[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((pushed.conditioning - 1.0).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_rank_one_projections_have_gap_one() {
        let e1 = vec![vec![1.0, 0.0, 0.0]];
        let e2 = vec![vec![0.0, 1.0, 0.0]];
        let mut a = e1.clone();
        a.push(vec![0.0, -1.0, 0.0]);
        let mut b = e1;
        b.extend(e2);
        assert!((factored_norm(&a, &b) - 1.0).abs() < 1e-14);
    }
}
