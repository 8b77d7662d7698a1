//! Finite-difference discretization of
//! `A u = -d_i(a_ij d_j u + a_i u) + b_i d_i u + c0 u` with homogeneous
//! Dirichlet conditions on a [`DomainMask`].
//!
//! Diagonal diffusion uses the conservative five-point stencil with
//! arithmetic face averages; mixed derivatives, the divergence-form drift and
//! the advection are centered. Coefficients are sampled at the nodes of the
//! grid and on the ring of boundary nodes around it.

use serde::{Deserialize, Serialize};

use crate::geometry::{DomainMask, GridSpec};
use crate::linalg::CsrMatrix;
use crate::{Error, Result};

/// A scalar coefficient as a function of position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ScalarField {
    Constant { value: f64 },
    /// `value + gx x + gy y`
    Affine { value: f64, gx: f64, gy: f64 },
    /// `value + amplitude cos(kx pi x) cos(ky pi y)`
    Trigonometric { value: f64, amplitude: f64, kx: f64, ky: f64 },
}

impl ScalarField {
    pub const ZERO: ScalarField = ScalarField::Constant { value: 0.0 };

    pub fn constant(value: f64) -> Self {
        ScalarField::Constant { value }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match *self {
            ScalarField::Constant { value } => value,
            ScalarField::Affine { value, gx, gy } => value + gx * x + gy * y,
            ScalarField::Trigonometric { value, amplitude, kx, ky } => {
                value + amplitude * (kx * PI * x).cos() * (ky * PI * y).cos()
            }
        }
    }

    /// Adds a constant offset.
    pub fn shifted(self, c: f64) -> Self {
        match self {
            ScalarField::Constant { value } => ScalarField::Constant { value: value + c },
            ScalarField::Affine { value, gx, gy } => ScalarField::Affine { value: value + c, gx, gy },
            ScalarField::Trigonometric { value, amplitude, kx, ky } => {
                ScalarField::Trigonometric { value: value + c, amplitude, kx, ky }
            }
        }
    }
}

/// Functional description of all coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSpec {
    /// Diffusion matrix, row-major `[a11, a12, a21, a22]`.
    pub a: [ScalarField; 4],
    /// Divergence-form drift `a_i`.
    pub drift: [ScalarField; 2],
    /// Advection `b_i`.
    pub advection: [ScalarField; 2],
    pub c0: ScalarField,
}

impl CoefficientSpec {
    /// `-Laplace + c0`.
    pub fn laplacian(c0: f64) -> Self {
        let one = ScalarField::constant(1.0);
        let zero = ScalarField::ZERO;
        CoefficientSpec {
            a: [one, zero, zero, one],
            drift: [zero, zero],
            advection: [zero, zero],
            c0: ScalarField::constant(c0),
        }
    }

    /// Constant anisotropic diffusion with a symmetric cross term, drift and
    /// advection; `amplitude` scales the first-order terms.
    pub fn anisotropic(c0: f64, amplitude: f64) -> Self {
        let c = ScalarField::constant;
        CoefficientSpec {
            a: [c(1.5), c(0.4), c(0.4), c(1.0)],
            drift: [c(0.3 * amplitude), c(-0.2 * amplitude)],
            advection: [c(0.5 * amplitude), c(0.4 * amplitude)],
            c0: c(c0),
        }
    }

    /// Affine diffusion and first-order terms.
    pub fn affine(c0: f64, amplitude: f64) -> Self {
        CoefficientSpec {
            a: [
                ScalarField::Affine { value: 1.0, gx: 0.5, gy: 0.0 },
                ScalarField::Affine { value: 0.1, gx: 0.0, gy: 0.1 },
                ScalarField::Affine { value: 0.1, gx: 0.0, gy: 0.1 },
                ScalarField::Affine { value: 1.0, gx: 0.0, gy: 0.5 },
            ],
            drift: [
                ScalarField::Affine { value: 0.2 * amplitude, gx: -0.3 * amplitude, gy: 0.0 },
                ScalarField::ZERO,
            ],
            advection: [
                ScalarField::Affine { value: 0.3 * amplitude, gx: 0.0, gy: 0.2 * amplitude },
                ScalarField::Affine { value: -0.2 * amplitude, gx: 0.3 * amplitude, gy: 0.0 },
            ],
            c0: ScalarField::constant(c0),
        }
    }

    /// Oscillating diffusion and advection.
    pub fn trigonometric(c0: f64, amplitude: f64) -> Self {
        let trig = |value, amp, kx, ky| ScalarField::Trigonometric { value, amplitude: amp, kx, ky };
        CoefficientSpec {
            a: [trig(1.2, 0.3, 2.0, 1.0), ScalarField::ZERO, ScalarField::ZERO, trig(1.0, 0.2, 1.0, 2.0)],
            drift: [trig(0.0, 0.4 * amplitude, 1.0, 1.0), trig(0.0, -0.3 * amplitude, 2.0, 1.0)],
            advection: [trig(0.2 * amplitude, 0.3 * amplitude, 1.0, 2.0), trig(0.0, 0.5 * amplitude, 1.0, 1.0)],
            c0: ScalarField::constant(c0),
        }
    }

    /// Looks up a named preset.
    pub fn preset(name: &str, c0: f64, amplitude: f64) -> Option<Self> {
        match name {
            "laplacian" => Some(Self::laplacian(c0)),
            "anisotropic" | "constant" => Some(Self::anisotropic(c0, amplitude)),
            "affine" => Some(Self::affine(c0, amplitude)),
            "trigonometric" => Some(Self::trigonometric(c0, amplitude)),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["laplacian", "anisotropic", "affine", "trigonometric"];

    /// Samples on the grid nodes and the surrounding ring of boundary nodes.
    pub fn sample(&self, grid: &GridSpec) -> CoefficientField {
        let m = grid.m();
        let h = grid.h();
        let (x0, y0) = grid.origin();
        let e = m + 2;
        let mut vals: [Vec<f64>; 9] = Default::default();
        let fields = [
            self.a[0],
            self.a[1],
            self.a[2],
            self.a[3],
            self.drift[0],
            self.drift[1],
            self.advection[0],
            self.advection[1],
            self.c0,
        ];
        for (v, f) in vals.iter_mut().zip(fields.iter()) {
            v.reserve(e * e);
            for jj in 0..e {
                for ii in 0..e {
                    v.push(f.eval(x0 + ii as f64 * h, y0 + jj as f64 * h));
                }
            }
        }
        CoefficientField { grid: *grid, spec: *self, vals }
    }
}

const A11: usize = 0;
const A12: usize = 1;
const A21: usize = 2;
const A22: usize = 3;
const D1: usize = 4;
const D2: usize = 5;
const B1: usize = 6;
const B2: usize = 7;
const C0: usize = 8;

/// Coefficients sampled on a grid (nodes plus the boundary ring).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    grid: GridSpec,
    spec: CoefficientSpec,
    vals: [Vec<f64>; 9],
}

impl CoefficientField {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn spec(&self) -> &CoefficientSpec {
        &self.spec
    }

    /// Value of component `c` at node `(i, j)`, where `i, j` range over
    /// `-1..=m` (the ring included).
    #[inline]
    fn at(&self, c: usize, i: isize, j: isize) -> f64 {
        let e = self.grid.m() + 2;
        self.vals[c][(j + 1) as usize * e + (i + 1) as usize]
    }

    fn max_abs(&self, c: usize) -> f64 {
        self.vals[c].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Smallest eigenvalue of the symmetrized diffusion matrix over all samples.
    pub fn min_ellipticity(&self) -> f64 {
        let mut lo = f64::INFINITY;
        for k in 0..self.vals[A11].len() {
            let a = self.vals[A11][k];
            let d = self.vals[A22][k];
            let b = 0.5 * (self.vals[A12][k] + self.vals[A21][k]);
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            lo = lo.min(mean - rad);
        }
        lo
    }

    pub fn all_finite(&self) -> bool {
        self.vals.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// `h max|b| / (2 alpha0)`; centered advection is reliable below one.
    pub fn peclet(&self, alpha0: f64) -> f64 {
        let b = self.max_abs(B1).max(self.max_abs(B2));
        self.grid.h() * b / (2.0 * alpha0)
    }
}

/// True iff the symmetrized diffusion matrix has all eigenvalues `>= alpha0`
/// at every sample (and all samples are finite).
pub fn check_ellipticity(coeffs: &CoefficientField, alpha0: f64) -> bool {
    coeffs.all_finite() && coeffs.min_ellipticity() >= alpha0
}

/// `lambda_A = |c0^-|_inf + (1 / (2 alpha0)) sum_i |a_i + b_i|_inf` and
/// `lambda_0 = lambda_A + alpha0 / 2`, maxima taken over the samples.
pub fn coercivity_constants(coeffs: &CoefficientField, alpha0: f64) -> (f64, f64) {
    let c0_neg = coeffs.vals[C0].iter().fold(0.0f64, |m, &c| m.max(-c));
    let mut sum = 0.0;
    for (da, db) in [(D1, B1), (D2, B2)] {
        sum += coeffs.vals[da].iter().zip(&coeffs.vals[db]).fold(0.0f64, |m, (x, y)| m.max((x + y).abs()));
    }
    let lambda_a = c0_neg + sum / (2.0 * alpha0);
    (lambda_a, lambda_a + alpha0 / 2.0)
}

/// Supremum of the coercivity constants over a family of coefficient fields.
pub fn family_coercivity_constants<'a>(
    fields: impl IntoIterator<Item = &'a CoefficientField>,
    alpha0: f64,
) -> (f64, f64) {
    let lambda_a = fields.into_iter().map(|c| coercivity_constants(c, alpha0).0).fold(0.0, f64::max);
    (lambda_a, lambda_a + alpha0 / 2.0)
}

/// The assembled operator on one domain.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    mask: DomainMask,
    coeffs: CoefficientField,
    matrix: CsrMatrix,
    alpha0: f64,
    lambda_a: f64,
    lambda0: f64,
    peclet: f64,
}

/// Assembles with `alpha0` taken as the smallest sampled ellipticity.
pub fn assemble(mask: &DomainMask, coeffs: &CoefficientField) -> Result<EllipticOperator> {
    let alpha0 = coeffs.min_ellipticity();
    assemble_with(mask, coeffs, alpha0)
}

/// Assembles with a prescribed ellipticity constant, which must hold.
pub fn assemble_with(mask: &DomainMask, coeffs: &CoefficientField, alpha0: f64) -> Result<EllipticOperator> {
    if mask.grid() != coeffs.grid() {
        return Err(Error::GridMismatch { left: mask.grid().to_string(), right: coeffs.grid().to_string() });
    }
    if !(alpha0 > 0.0) || !check_ellipticity(coeffs, alpha0) {
        return Err(Error::NotElliptic(format!(
            "smallest symmetric diffusion eigenvalue {:.6e} is below alpha0 = {alpha0:.6e}",
            coeffs.min_ellipticity()
        )));
    }
    let grid = mask.grid();
    let m = grid.m() as isize;
    let h = grid.h();
    let ih2 = 1.0 / (h * h);
    let i2h = 1.0 / (2.0 * h);
    let i4h2 = 1.0 / (4.0 * h * h);
    let c = coeffs;
    let mut trip = Vec::with_capacity(mask.count() * 9);
    for s in 0..mask.count() {
        let (iu, ju) = mask.node_ij(s);
        let (i, j) = (iu as isize, ju as isize);
        let mut push = |di: isize, dj: isize, v: f64| {
            let (ni, nj) = (i + di, j + dj);
            if ni < 0 || nj < 0 || ni >= m || nj >= m {
                return;
            }
            if let Some(t) = mask.slot(grid.index(ni as usize, nj as usize)) {
                trip.push((s, t, v));
            }
        };
        // -d_x(a11 d_x u) - d_y(a22 d_y u)
        let ae = 0.5 * (c.at(A11, i, j) + c.at(A11, i + 1, j));
        let aw = 0.5 * (c.at(A11, i, j) + c.at(A11, i - 1, j));
        let an = 0.5 * (c.at(A22, i, j) + c.at(A22, i, j + 1));
        let as_ = 0.5 * (c.at(A22, i, j) + c.at(A22, i, j - 1));
        push(0, 0, (ae + aw + an + as_) * ih2 + c.at(C0, i, j));
        push(1, 0, -ae * ih2);
        push(-1, 0, -aw * ih2);
        push(0, 1, -an * ih2);
        push(0, -1, -as_ * ih2);
        // -d_x(a12 d_y u) - d_y(a21 d_x u)
        let a12e = c.at(A12, i + 1, j);
        let a12w = c.at(A12, i - 1, j);
        let a21n = c.at(A21, i, j + 1);
        let a21s = c.at(A21, i, j - 1);
        push(1, 1, -(a12e + a21n) * i4h2);
        push(1, -1, (a12e + a21s) * i4h2);
        push(-1, 1, (a12w + a21n) * i4h2);
        push(-1, -1, -(a12w + a21s) * i4h2);
        // -d_i(a_i u) + b_i d_i u
        push(1, 0, (-c.at(D1, i + 1, j) + c.at(B1, i, j)) * i2h);
        push(-1, 0, (c.at(D1, i - 1, j) - c.at(B1, i, j)) * i2h);
        push(0, 1, (-c.at(D2, i, j + 1) + c.at(B2, i, j)) * i2h);
        push(0, -1, (c.at(D2, i, j - 1) - c.at(B2, i, j)) * i2h);
    }
    let n = mask.count();
    let matrix = CsrMatrix::from_triplets(n, n, trip);
    let (lambda_a, lambda0) = coercivity_constants(coeffs, alpha0);
    let peclet = coeffs.peclet(alpha0);
    if peclet >= 1.0 {
        log::warn!("cell Peclet number {peclet:.3} >= 1 on {}: centered advection may oscillate", mask.label());
    }
    Ok(EllipticOperator { mask: mask.clone(), coeffs: coeffs.clone(), matrix, alpha0, lambda_a, lambda0, peclet })
}

impl EllipticOperator {
    pub fn mask(&self) -> &DomainMask {
        &self.mask
    }

    pub fn coeffs(&self) -> &CoefficientField {
        &self.coeffs
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn lambda_a(&self) -> f64 {
        self.lambda_a
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn peclet(&self) -> f64 {
        self.peclet
    }

    /// `A u`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: u.len() });
        }
        Ok(self.matrix.mul_vec(u))
    }

    /// Discrete form `a(u, v) = h^2 v^T A u`.
    pub fn form_value(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        let au = self.apply(u)?;
        Ok(self.mask.l2_dot(v, &au))
    }

    /// Upper bound on the spectral radius of `A`.
    pub fn spectral_radius_bound(&self) -> f64 {
        self.matrix.gershgorin_radius()
    }

    /// Whether the matrix is symmetric to a relative tolerance.
    pub fn is_symmetric(&self, rtol: f64) -> bool {
        let scale = self.matrix.triplets().fold(0.0f64, |m, (_, _, v)| m.max(v.abs()));
        self.matrix.triplets().all(|(i, j, v)| (v - self.matrix.get(j, i)).abs() <= rtol * scale)
    }
}

/// Discrete `H^1_0` norm squared of a mask vector: `||u||^2` plus the squared
/// forward differences over every grid face touching the domain (values
/// outside the domain are zero).
pub fn h1_norm_sq(mask: &DomainMask, u: &[f64]) -> f64 {
    let grid = mask.grid();
    let m = grid.m() as isize;
    let val = |i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= m || j >= m {
            return 0.0;
        }
        mask.slot(grid.index(i as usize, j as usize)).map_or(0.0, |s| u[s])
    };
    let mut grad = 0.0;
    for j in -1..m {
        for i in -1..m {
            let here = val(i, j);
            let right = val(i + 1, j);
            let up = val(i, j + 1);
            if j >= 0 {
                grad += (right - here).powi(2);
            }
            if i >= 0 {
                grad += (up - here).powi(2);
            }
        }
    }
    // (du/h)^2 h^2 summed over faces
    mask.l2_norm(u).powi(2) + grad
}

/// Outcome of sampling the Garding inequality
/// `a(u, u) + lambda0 |u|^2 >= (alpha0 / 2) |u|_{H^1}^2`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GardingReport {
    pub samples: usize,
    pub violations: usize,
    /// Smallest ratio of the left to the right side.
    pub min_ratio: f64,
}

/// Checks the Garding inequality on `samples` random vectors, alternating
/// white noise and single random sine modes.
pub fn garding_check(op: &EllipticOperator, samples: usize, seed: u64) -> Result<GardingReport> {
    use rand::{Rng, SeedableRng};
    let mask = op.mask();
    let grid = mask.grid();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut min_ratio = f64::INFINITY;
    for s in 0..samples {
        let u: Vec<f64> = if s % 2 == 0 {
            (0..mask.count()).map(|_| rng.random_range(-1.0..1.0)).collect()
        } else {
            let (kx, ky) = (rng.random_range(1..=8) as f64, rng.random_range(1..=8) as f64);
            let (x0, y0) = grid.origin();
            let l = grid.side();
            mask.sample(|x, y| {
                (kx * std::f64::consts::PI * (x - x0) / l).sin() * (ky * std::f64::consts::PI * (y - y0) / l).sin()
            })
        };
        let lhs = op.form_value(&u, &u)? + op.lambda0() * mask.l2_norm(&u).powi(2);
        let rhs = 0.5 * op.alpha0() * h1_norm_sq(mask, &u);
        if rhs > 0.0 {
            min_ratio = min_ratio.min(lhs / rhs);
        }
        if lhs < rhs * (1.0 - 1e-12) {
            violations += 1;
        }
    }
    Ok(GardingReport { samples, violations, min_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_family, FamilyKind};
    use proptest::prelude::*;

    fn grid(m: usize) -> GridSpec {
        GridSpec::unit(m).unwrap()
    }

    fn constant_a(a: [f64; 4]) -> CoefficientSpec {
        let mut s = CoefficientSpec::laplacian(0.0);
        s.a = a.map(ScalarField::constant);
        s
    }

    #[test]
    fn ellipticity_examples() {
        let g = grid(5);
        assert!(check_ellipticity(&CoefficientSpec::laplacian(0.0).sample(&g), 1.0));
        assert!(!check_ellipticity(&constant_a([1.0, 0.0, 0.0, -1.0]).sample(&g), 0.5));
        // eigenvalues of [[2, .5], [.5, 1]]: 3/2 -+ sqrt(1/2)
        let f = constant_a([2.0, 0.5, 0.5, 1.0]).sample(&g);
        let lo = 1.5 - 0.5f64.sqrt();
        assert!((f.min_ellipticity() - lo).abs() < 1e-15);
        assert!(check_ellipticity(&f, 0.7));
        assert!(!check_ellipticity(&f, 0.8));
    }

    #[test]
    fn coercivity_examples() {
        let g = grid(5);
        let (la, l0) = coercivity_constants(&CoefficientSpec::laplacian(2.0).sample(&g), 1.0);
        assert_eq!((la, l0), (0.0, 0.5));
        let (la, l0) = coercivity_constants(&CoefficientSpec::laplacian(-30.0).sample(&g), 1.0);
        assert_eq!((la, l0), (30.0, 30.5));
        let mut s = CoefficientSpec::laplacian(0.0);
        s.drift[0] = ScalarField::constant(1.0);
        s.advection[0] = ScalarField::constant(1.0);
        let (la, _) = coercivity_constants(&s.sample(&g), 1.0);
        assert_eq!(la, 1.0);
    }

    #[test]
    fn five_point_stencil_on_small_grid() {
        let g = grid(3);
        let op = assemble(&DomainMask::full(g), &CoefficientSpec::laplacian(0.0).sample(&g)).unwrap();
        let h2 = g.h().powi(2);
        let a = op.matrix();
        assert!((a.get(4, 4) - 4.0 / h2).abs() < 1e-12);
        for nb in [1, 3, 5, 7] {
            assert!((a.get(4, nb) + 1.0 / h2).abs() < 1e-12);
        }
        assert_eq!(a.get(4, 0), 0.0);
        // 9 diagonal entries, 12 neighbour pairs
        assert_eq!(a.nnz(), 9 + 2 * 12);
    }

    #[test]
    fn potential_shifts_the_diagonal() {
        let g = grid(9);
        let mask = DomainMask::full(g);
        let spec = CoefficientSpec::trigonometric(0.0, 1.0);
        let base = assemble(&mask, &spec.sample(&g)).unwrap();
        let mut shifted_spec = spec;
        shifted_spec.c0 = spec.c0.shifted(-7.5);
        let shifted = assemble(&mask, &shifted_spec.sample(&g)).unwrap();
        let expect = base.matrix().scaled_shift(1.0, -7.5);
        assert_eq!(shifted.matrix().max_abs_diff(&expect), 0.0);
    }

    #[test]
    fn laplacian_eigenfunction_consistency() {
        use std::f64::consts::PI;
        let mut errs = Vec::new();
        for m in [15usize, 31, 63] {
            let g = grid(m);
            let mask = DomainMask::full(g);
            let op = assemble(&mask, &CoefficientSpec::laplacian(0.0).sample(&g)).unwrap();
            let u = mask.sample(|x, y| (PI * x).sin() * (PI * y).sin());
            let au = op.apply(&u).unwrap();
            let err = au.iter().zip(&u).map(|(a, b)| (a - 2.0 * PI * PI * b).abs()).fold(0.0, f64::max);
            errs.push(err);
        }
        // second order: error ratios near 4 under halving h
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
        assert!(errs[2] < 0.01 * 2.0 * PI * PI);
    }

    #[test]
    fn general_operator_is_second_order_consistent() {
        // manufactured check against the exact operator applied to a smooth u
        // vanishing on the boundary, coefficients of every kind
        use std::f64::consts::PI;
        let spec = CoefficientSpec::affine(3.0, 1.0);
        let ex = |x: f64, y: f64| {
            let u = (PI * x).sin() * (PI * y).sin();
            let ux = PI * (PI * x).cos() * (PI * y).sin();
            let uy = PI * (PI * x).sin() * (PI * y).cos();
            let uxx = -PI * PI * u;
            let uyy = -PI * PI * u;
            let uxy = PI * PI * (PI * x).cos() * (PI * y).cos();
            let a11 = spec.a[0].eval(x, y);
            let a12 = spec.a[1].eval(x, y);
            let a21 = spec.a[2].eval(x, y);
            let a22 = spec.a[3].eval(x, y);
            // gradients of the affine fields
            let (a11x, a12x, a21y, a22y) = (0.5, 0.0, 0.1, 0.5);
            let d1 = spec.drift[0].eval(x, y);
            let d1x = -0.3;
            let b1 = spec.advection[0].eval(x, y);
            let b2 = spec.advection[1].eval(x, y);
            -(a11x * ux + a11 * uxx + a12x * uy + a12 * uxy)
                - (a21y * ux + a21 * uxy + a22y * uy + a22 * uyy)
                - (d1x * u + d1 * ux)
                + b1 * ux
                + b2 * uy
                + 3.0 * u
        };
        let mut errs = Vec::new();
        for m in [15usize, 31, 63] {
            let g = grid(m);
            let mask = DomainMask::full(g);
            let op = assemble(&mask, &spec.sample(&g)).unwrap();
            let u = mask.sample(|x, y| (PI * x).sin() * (PI * y).sin());
            let au = op.apply(&u).unwrap();
            let exact = mask.sample(ex);
            errs.push(au.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        assert!(errs[0] / errs[1] > 3.0 && errs[1] / errs[2] > 3.0, "{errs:?}");
    }

    #[test]
    fn symmetric_diffusion_gives_symmetric_matrix() {
        let g = grid(17);
        let fam = build_family(FamilyKind::Dumbbell, 1, g).unwrap();
        let mut spec = CoefficientSpec::trigonometric(-4.0, 0.0);
        spec.a[1] = ScalarField::Affine { value: 0.2, gx: 0.1, gy: -0.1 };
        spec.a[2] = spec.a[1];
        let op = assemble(&fam.members[0].mask, &spec.sample(&g)).unwrap();
        assert!(op.is_symmetric(1e-14));
    }

    #[test]
    fn coefficient_convergence_in_matrix_norm() {
        let g = grid(15);
        let mask = DomainMask::full(g);
        let base = CoefficientSpec::anisotropic(-2.0, 1.0);
        let limit = assemble(&mask, &base.sample(&g)).unwrap();
        let mut prev = f64::INFINITY;
        for n in 1..6 {
            let eps = 1.0 / (1u32 << n) as f64;
            let mut spec = base;
            spec.a[0] = spec.a[0].shifted(eps);
            spec.advection[1] = spec.advection[1].shifted(-eps);
            spec.c0 = spec.c0.shifted(eps);
            let opn = assemble(&mask, &spec.sample(&g)).unwrap();
            let d = opn.matrix().max_abs_diff(limit.matrix());
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn rejects_non_elliptic_and_mismatched_grids() {
        let g = grid(5);
        let bad = constant_a([1.0, 0.0, 0.0, -1.0]).sample(&g);
        assert!(matches!(assemble(&DomainMask::full(g), &bad), Err(Error::NotElliptic(_))));
        let other = CoefficientSpec::laplacian(0.0).sample(&grid(7));
        assert!(matches!(assemble(&DomainMask::full(g), &other), Err(Error::GridMismatch { .. })));
    }

    proptest! {
        #[test]
        fn garding_on_random_vectors(seed in any::<u64>(), preset in 0usize..4) {
            use rand::{Rng, SeedableRng};
            let g = grid(11);
            let fam = build_family(FamilyKind::Fingers, 1, g).unwrap();
            let mask = &fam.members[0].mask;
            let name = CoefficientSpec::PRESETS[preset];
            let op = assemble(mask, &CoefficientSpec::preset(name, -5.0, 1.0).unwrap().sample(&g)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..mask.count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = op.form_value(&u, &u).unwrap() + op.lambda0() * mask.l2_norm(&u).powi(2);
            let rhs = 0.5 * op.alpha0() * h1_norm_sq(mask, &u);
            prop_assert!(lhs >= rhs * (1.0 - 1e-12), "{} < {}", lhs, rhs);
            prop_assert_eq!(op.apply(&vec![0.0; mask.count()]).unwrap(), vec![0.0; mask.count()]);
        }
    }
}
