//! The cutoff-modified semiflow `u_t + A u = Psi(u) g(u)`, semigroup and
//! group actions, dichotomy constants and the renormed norms on `X^-` and
//! `X^+`.

use std::sync::{Arc, Mutex};

use faer::Mat;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::DomainMask;
use crate::linalg::{eig, expm, mat_vec, norm2, solve, solve_complex, BandLu, CsrMatrix, ResolventKrylov};
use crate::operators::EllipticOperator;
use crate::spectral::{Projector, SplitKind, SpectralSplit, SubspaceBasis};
use crate::{Error, Result};

/// Pointwise source `g(u)` with `g(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Zero,
    /// `c u^3`
    Cubic,
    /// `c u^2 / (1 + u^2)`
    Saturating,
    /// `c sin(u) - c u`
    Sine,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Zero => "zero",
            SourceKind::Cubic => "cubic",
            SourceKind::Saturating => "saturating",
            SourceKind::Sine => "sine",
        }
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(SourceKind::Zero),
            "cubic" => Ok(SourceKind::Cubic),
            "saturating" => Ok(SourceKind::Saturating),
            "sine" => Ok(SourceKind::Sine),
            other => Err(Error::Parse(format!("unknown nonlinearity preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub kind: SourceKind,
    pub c: f64,
}

impl Source {
    pub fn new(kind: SourceKind, c: f64) -> Self {
        Source { kind, c }
    }

    pub fn zero() -> Self {
        Source { kind: SourceKind::Zero, c: 0.0 }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let c = self.c;
        match self.kind {
            SourceKind::Zero => 0.0,
            SourceKind::Cubic => c * u * u * u,
            SourceKind::Saturating => c * u * u / (1.0 + u * u),
            SourceKind::Sine => c * (u.sin() - u),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.kind == SourceKind::Zero || self.c == 0.0
    }
}

/// `Psi`: 1 on `[0, delta]`, `2 - s / delta` on `[delta, 2 delta]`, 0 beyond.
pub fn cutoff_factor(u_norm: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "cutoff radius must be positive");
    if u_norm <= delta {
        1.0
    } else if u_norm <= 2.0 * delta {
        2.0 - u_norm / delta
    } else {
        0.0
    }
}

/// The cut-off nonlinearity `f~(u) = Psi(|u|_{L^2}) g(u)` with its measured
/// Lipschitz constants.
#[derive(Debug, Clone, Serialize)]
pub struct CutoffNonlinearity {
    pub g: Source,
    pub delta: f64,
    /// Measured Lipschitz constant of `f~` on `B(0, 2 delta)` (global, since
    /// `f~` vanishes outside that ball).
    pub epsilon: f64,
    /// Measured Lipschitz constant of the unmodified `g` on `B(0, delta)`.
    pub local_epsilon: f64,
    /// Optional target with `epsilon < eta / 4`.
    pub eta: Option<f64>,
}

impl CutoffNonlinearity {
    /// Unmeasured nonlinearity (`epsilon = local_epsilon = NaN`).
    pub fn new(g: Source, delta: f64, eta: Option<f64>) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Config { field: "nonlinearity.delta".into(), message: format!("must be positive, got {delta}") });
        }
        Ok(CutoffNonlinearity { g, delta, epsilon: f64::NAN, local_epsilon: f64::NAN, eta })
    }

    /// Measures both Lipschitz constants on `mask`.
    pub fn measured(mut self, mask: &DomainMask, samples: usize, seed: u64) -> Self {
        self.epsilon = estimate_lipschitz(&self, mask, 2.0 * self.delta, samples, seed);
        let raw = CutoffNonlinearity { delta: f64::INFINITY, ..self.clone() };
        self.local_epsilon = estimate_lipschitz(&raw, mask, self.delta, samples, seed ^ 0x10ca1);
        self
    }

    pub fn is_zero(&self) -> bool {
        self.g.is_zero()
    }

    /// `f(u)` without the cutoff.
    pub fn original(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|&x| self.g.eval(x)).collect()
    }
}

/// `Psi(|u|) g(u)` nodewise.
pub fn modified_f(u: &[f64], nl: &CutoffNonlinearity, mask: &DomainMask) -> Vec<f64> {
    if nl.is_zero() {
        return vec![0.0; u.len()];
    }
    let psi = if nl.delta.is_finite() { cutoff_factor(mask.l2_norm(u), nl.delta) } else { 1.0 };
    if psi == 0.0 {
        return vec![0.0; u.len()];
    }
    u.iter().map(|&x| psi * nl.g.eval(x)).collect()
}

/// A random smooth field: a sine series over the box with decaying Gaussian
/// coefficients, restricted to `mask`.
pub fn random_smooth_field(mask: &DomainMask, rng: &mut impl Rng, modes: usize) -> Vec<f64> {
    let grid = mask.grid();
    let (x0, y0) = grid.origin();
    let side = grid.side();
    let mut coef = vec![0.0; modes * modes];
    for p in 0..modes {
        for q in 0..modes {
            let a: f64 = rng.sample(StandardNormal);
            coef[p * modes + q] = a / ((p + 1) * (p + 1) + (q + 1) * (q + 1)) as f64;
        }
    }
    use std::f64::consts::PI;
    mask.sample(|x, y| {
        let (sx, sy) = ((x - x0) / side, (y - y0) / side);
        let mut v = 0.0;
        for p in 0..modes {
            let sp = ((p + 1) as f64 * PI * sx).sin();
            for q in 0..modes {
                v += coef[p * modes + q] * sp * ((q + 1) as f64 * PI * sy).sin();
            }
        }
        v
    })
}

fn random_white(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `max |f~(u) - f~(v)| / |u - v|` over sampled pairs in `B(0, radius)`,
/// times 1.5. Half the pairs are far apart, half are nearby perturbations.
pub fn estimate_lipschitz(nl: &CutoffNonlinearity, mask: &DomainMask, radius: f64, samples: usize, seed: u64) -> f64 {
    assert!(radius > 0.0, "radius must be positive");
    if nl.is_zero() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = mask.count();
    let point = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        let mut d = if rng.random_bool(0.5) { random_smooth_field(mask, rng, 4) } else { random_white(n, rng) };
        let nd = mask.l2_norm(&d);
        let r = scale * rng.random_range(0.0..1.0f64);
        d.iter_mut().for_each(|x| *x *= r / nd);
        d
    };
    let mut best: f64 = 0.0;
    for s in 0..samples {
        let u = point(&mut rng, radius);
        let v = if s % 2 == 0 {
            point(&mut rng, radius)
        } else {
            let p = point(&mut rng, 1e-4 * radius);
            let w: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a + b).collect();
            if mask.l2_norm(&w) > radius {
                continue;
            }
            w
        };
        let du = mask.l2_norm(&crate::linalg::sub(&u, &v));
        if du == 0.0 {
            continue;
        }
        let df = mask.l2_norm(&crate::linalg::sub(&modified_f(&u, nl, mask), &modified_f(&v, nl, mask)));
        best = best.max(df / du);
    }
    1.5 * best
}

/// Time integrator for the semiflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Crank-Nicolson for `A`, second-order Adams-Bashforth for `f~`.
    CnAb,
    /// Exponential Euler (first order).
    ExpEuler,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cn-ab" => Ok(Scheme::CnAb),
            "exp-euler" => Ok(Scheme::ExpEuler),
            other => Err(Error::Parse(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiflowConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub t_horizon: f64,
}

impl SemiflowConfig {
    /// `dt = min(1e-3, 0.1 / max |lambda|)` over the eigenvalues that define
    /// the split: the unstable and centre ones and the leading stable one.
    /// Eigenvalues computed only to certify the spectral tail are ignored, so
    /// the step does not depend on how many of them were requested.
    pub fn default_dt(split: &SpectralSplit) -> f64 {
        let lead = split.top_stable().map(|x| x.abs()).unwrap_or(0.0);
        let lmax = split
            .sigma_u
            .iter()
            .chain(split.sigma_c.iter())
            .map(|p| p.value.norm())
            .fold(lead, f64::max);
        if lmax > 0.0 {
            (0.1 / lmax).min(1e-3)
        } else {
            1e-3
        }
    }
}

/// `exp(-tA) v` by Crank-Nicolson with step at most `dt`.
pub fn semigroup_action(op: &EllipticOperator, v: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    if v.len() != op.dim() {
        return Err(Error::DimensionMismatch { expected: op.dim(), got: v.len() });
    }
    if t == 0.0 {
        return Ok(v.to_vec());
    }
    let steps = (t / dt - 1e-9).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let a = op.matrix();
    let lu = BandLu::<f64>::factor_shifted(a, 0.5 * h, 1.0)?;
    let mut u = v.to_vec();
    for _ in 0..steps {
        let au = a.mul_vec(&u);
        for (x, y) in u.iter_mut().zip(&au) {
            *x -= 0.5 * h * y;
        }
        lu.solve_in_place(&mut u);
    }
    Ok(u)
}

/// The semiflow `Phi_t` of the modified equation on one domain.
pub struct Semiflow<'a> {
    op: &'a EllipticOperator,
    nl: &'a CutoffNonlinearity,
    scheme: Scheme,
    dt: f64,
    cache: Mutex<Vec<(u64, Arc<BandLu<f64>>)>>,
}

impl<'a> Semiflow<'a> {
    pub fn new(op: &'a EllipticOperator, nl: &'a CutoffNonlinearity, scheme: Scheme, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Config { field: "semiflow.dt".into(), message: format!("must be positive, got {dt}") });
        }
        Ok(Semiflow { op, nl, scheme, dt, cache: Mutex::new(Vec::new()) })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn operator(&self) -> &EllipticOperator {
        self.op
    }

    pub fn nonlinearity(&self) -> &CutoffNonlinearity {
        self.nl
    }

    /// LU of `I + s A`, cached by `s`.
    fn factor(&self, s: f64) -> Result<Arc<BandLu<f64>>> {
        let key = s.to_bits();
        if let Some((_, lu)) = self.cache.lock().unwrap().iter().find(|(k, _)| *k == key) {
            return Ok(lu.clone());
        }
        let lu = Arc::new(BandLu::<f64>::factor_shifted(self.op.matrix(), s, 1.0)?);
        let mut c = self.cache.lock().unwrap();
        if c.len() > 8 {
            c.remove(0);
        }
        c.push((key, lu.clone()));
        Ok(lu)
    }

    fn f(&self, u: &[f64]) -> Vec<f64> {
        modified_f(u, self.nl, self.op.mask())
    }

    /// `Phi_t(u0)`.
    pub fn flow(&self, u0: &[f64], t: f64) -> Result<Vec<f64>> {
        self.flow_observed(u0, t, |_, _| true).map(|(_, u)| u)
    }

    /// Integrates up to `t`, calling `observe(t_k, u_k)` after every step
    /// (and once at `t = 0`). Stops early when `observe` returns `false`;
    /// returns the final time and state.
    pub fn flow_observed(
        &self,
        u0: &[f64],
        t: f64,
        mut observe: impl FnMut(f64, &[f64]) -> bool,
    ) -> Result<(f64, Vec<f64>)> {
        if t < 0.0 {
            return Err(Error::NegativeTime(t));
        }
        if u0.len() != self.op.dim() {
            return Err(Error::DimensionMismatch { expected: self.op.dim(), got: u0.len() });
        }
        let mut u = u0.to_vec();
        if !observe(0.0, &u) || t == 0.0 {
            return Ok((0.0, u));
        }
        let steps = (t / self.dt - 1e-9).ceil().max(1.0) as usize;
        let h = t / steps as f64;
        let a = self.op.matrix();
        let bound = 1e12 * (1.0 + norm2(u0));
        match self.scheme {
            Scheme::CnAb => {
                let lu = self.factor(0.5 * h)?;
                let mut f_prev = self.f(&u);
                for k in 0..steps {
                    let f_now = if k == 0 { f_prev.clone() } else { self.f(&u) };
                    let au = a.mul_vec(&u);
                    for i in 0..u.len() {
                        let nl = if k == 0 { f_now[i] } else { 1.5 * f_now[i] - 0.5 * f_prev[i] };
                        u[i] += -0.5 * h * au[i] + h * nl;
                    }
                    lu.solve_in_place(&mut u);
                    f_prev = f_now;
                    let tk = (k + 1) as f64 * h;
                    if !u.iter().all(|x| x.is_finite()) || norm2(&u) > bound {
                        return Err(Error::Divergence { t: tk });
                    }
                    if !observe(tk, &u) {
                        return Ok((tk, u));
                    }
                }
            }
            Scheme::ExpEuler => {
                let lu = self.factor(h)?;
                let apply = |x: &[f64]| a.mul_vec(x);
                let resolve = |x: &[f64]| lu.solve(x);
                for k in 0..steps {
                    let fu = self.f(&u);
                    let lin = ResolventKrylov::build(&u, 24, apply, resolve, |_| {}).exp_action(h);
                    let mut next = lin;
                    if norm2(&fu) > 0.0 {
                        let src = ResolventKrylov::build(&fu, 24, apply, resolve, |_| {}).phi1_action(h);
                        for (x, y) in next.iter_mut().zip(&src) {
                            *x += h * y;
                        }
                    }
                    if next.is_empty() {
                        next = vec![0.0; u.len()];
                    }
                    u = next;
                    let tk = (k + 1) as f64 * h;
                    if !u.iter().all(|x| x.is_finite()) || norm2(&u) > bound {
                        return Err(Error::Divergence { t: tk });
                    }
                    if !observe(tk, &u) {
                        return Ok((tk, u));
                    }
                }
            }
        }
        Ok((t, u))
    }
}

/// Sampled states of a mild solution.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// Rows `(t, |u|, |P^+ u|, |P^- u|)` in `L^2`.
    pub fn norm_rows(&self, proj: &Projector) -> Vec<[f64; 4]> {
        let mask = proj.mask();
        self.times
            .iter()
            .zip(&self.states)
            .map(|(t, u)| [*t, mask.l2_norm(u), mask.l2_norm(&proj.plus(u)), mask.l2_norm(&proj.minus(u))])
            .collect()
    }
}

/// Integrates to `t`, recording every `record_every`-th step.
pub fn evolve(
    config: &SemiflowConfig,
    op: &EllipticOperator,
    nl: &CutoffNonlinearity,
    u0: &[f64],
    t: f64,
    record_every: usize,
) -> Result<Trajectory> {
    let flow = Semiflow::new(op, nl, config.scheme, config.dt)?;
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let every = record_every.max(1);
    let mut k = 0usize;
    let (tf, uf) = flow.flow_observed(u0, t, |tk, u| {
        if k % every == 0 {
            traj.times.push(tk);
            traj.states.push(u.to_vec());
        }
        k += 1;
        true
    })?;
    if traj.times.last() != Some(&tf) {
        traj.times.push(tf);
        traj.states.push(uf);
    }
    Ok(traj)
}

/// A basis `F` of `X^+` with dual functionals, the matrix `R` of `-A` on
/// `X^+` in that basis, and the `L^2` Gram matrix.
#[derive(Debug, Clone)]
pub struct PlusFrame {
    mask: DomainMask,
    vectors: Vec<Vec<f64>>,
    duals: Vec<Vec<f64>>,
    reduced: Mat<f64>,
    gram: Mat<f64>,
}

impl PlusFrame {
    /// The realified eigenvector basis of `proj`.
    pub fn from_projector(proj: &Projector, op: &EllipticOperator) -> Result<Self> {
        Self::with_basis(proj, op, &SubspaceBasis::from_projector(proj))
    }

    /// An arbitrary basis of the range of `proj` (e.g. a pushed-forward one).
    pub fn with_basis(proj: &Projector, op: &EllipticOperator, basis: &SubspaceBasis) -> Result<Self> {
        let d = proj.d();
        if basis.d() != d {
            return Err(Error::DimensionMismatch { expected: d, got: basis.d() });
        }
        let mask = proj.mask().clone();
        let vectors = basis.vectors.clone();
        let c = Mat::from_fn(d, d, |i, j| crate::linalg::dot(&proj.left()[i], &vectors[j]));
        let cinv = if d == 0 { Mat::zeros(0, 0) } else { solve(&c, &Mat::<f64>::identity(d, d))? };
        let duals: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut g = vec![0.0; mask.count()];
                for (j, l) in proj.left().iter().enumerate() {
                    crate::linalg::axpy(cinv[(i, j)], l, &mut g);
                }
                g
            })
            .collect();
        let av: Vec<Vec<f64>> = vectors.iter().map(|f| op.matrix().mul_vec(f)).collect();
        let reduced = Mat::from_fn(d, d, |i, j| -crate::linalg::dot(&duals[i], &av[j]));
        let gram = Mat::from_fn(d, d, |i, j| mask.l2_dot(&vectors[i], &vectors[j]));
        Ok(PlusFrame { mask, vectors, duals, reduced, gram })
    }

    pub fn d(&self) -> usize {
        self.vectors.len()
    }

    pub fn mask(&self) -> &DomainMask {
        &self.mask
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn reduced(&self) -> &Mat<f64> {
        &self.reduced
    }

    /// Coordinates of `P^+ u` in the frame.
    pub fn coords(&self, u: &[f64]) -> Vec<f64> {
        self.duals.iter().map(|g| crate::linalg::dot(g, u)).collect()
    }

    pub fn combine(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mask.count()];
        for (f, cj) in self.vectors.iter().zip(c) {
            crate::linalg::axpy(*cj, f, &mut out);
        }
        out
    }

    /// `|F c|_{L^2}`.
    pub fn l2_norm(&self, c: &[f64]) -> f64 {
        let g = mat_vec(&self.gram, c);
        crate::linalg::dot(c, &g).max(0.0).sqrt()
    }

    /// Coordinates of `S^+(t) F c = F exp(R t) c`, any real `t`.
    pub fn group(&self, c: &[f64], t: f64) -> Vec<f64> {
        group_action_plus(self, c, t)
    }
}

/// `exp(R t) c` for the reduced matrix of `-A` on `X^+`; valid for every real `t`.
pub fn group_action_plus(frame: &PlusFrame, c: &[f64], t: f64) -> Vec<f64> {
    let d = frame.d();
    if d == 0 {
        return Vec::new();
    }
    let e = expm(&Mat::from_fn(d, d, |i, j| t * frame.reduced[(i, j)]));
    mat_vec(&e, c)
}

/// Growth exponents and norm-equivalence constants of the split semigroup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyConstants {
    pub kind: SplitKind,
    pub alpha: f64,
    pub beta: f64,
    pub m1: f64,
    pub m2: f64,
    /// Decay rate of `S^s`: minus the largest computed stable real part.
    pub sigma_decay: f64,
}

/// `(alpha, beta, sigma)` from the computed spectrum: `beta` at the midpoint
/// of its admissible interval; for the unstable split `alpha` is the
/// midpoint of `(0, beta)`.
///
/// `sigma` is `sigma_fraction` times the distance from the stable spectrum
/// to the imaginary axis. A fraction below one leaves room for perturbed
/// problems whose stable spectrum lies closer to the axis.
pub fn dichotomy_exponents(split: &SpectralSplit, kind: SplitKind, sigma_fraction: f64) -> Result<(f64, f64, f64)> {
    if !(sigma_fraction > 0.0 && sigma_fraction <= 1.0) {
        return Err(Error::Config {
            field: "dynamics.sigma_fraction".into(),
            message: format!("must lie in (0, 1], got {sigma_fraction}"),
        });
    }
    if !split.hyperbolic {
        return Err(Error::NotHyperbolic { count: split.sigma_c.len(), tau_c: split.tau_c });
    }
    let sigma = -split
        .top_stable()
        .ok_or_else(|| Error::Dichotomy("no stable eigenvalue was computed".into()))?;
    if !(sigma > 0.0) {
        return Err(Error::Dichotomy(format!("stable spectral bound {} is not negative", -sigma)));
    }
    let sigma = sigma_fraction * sigma;
    match kind {
        SplitKind::Stable => {
            let alpha = -sigma;
            let beta = 0.5 * alpha;
            Ok((alpha, beta, sigma))
        }
        SplitKind::Unstable => {
            let lu = split
                .min_unstable()
                .ok_or_else(|| Error::Dichotomy("no unstable eigenvalue: admissible interval for beta is empty".into()))?;
            let beta = 0.5 * lu;
            let alpha = 0.5 * beta;
            if !(alpha > 0.0 && beta > alpha) {
                return Err(Error::Dichotomy(format!("degenerate interval: alpha {alpha}, beta {beta}")));
            }
            Ok((alpha, beta, sigma))
        }
    }
}

const CURVE_POINTS: usize = 64;
const TAIL_RATIO: f64 = 1e-3;
const PLATEAU_RTOL: f64 = 1e-6;
const MAX_DOUBLINGS: usize = 3;

/// Renormed norms
/// `|v|_- = sup_{t >= 0} e^{-alpha t} |S^-(t) v|` and
/// `|w|_+ = sup_{t <= 0} e^{-beta t} |S^+(t) w|`,
/// the suprema taken over adaptive time grids with a truncation certificate.
pub struct RenormedNorm {
    matrix: CsrMatrix,
    proj: Projector,
    frame: PlusFrame,
    alpha: f64,
    beta: f64,
    /// Largest real part of the spectrum in `X^-`.
    top_minus: f64,
    /// Smallest real part of the spectrum in `X^+`.
    min_plus: f64,
    lu: BandLu<f64>,
}

impl RenormedNorm {
    pub fn new(op: &EllipticOperator, proj: &Projector, frame: &PlusFrame, split: &SpectralSplit, alpha: f64, beta: f64) -> Result<Self> {
        let kind = proj.kind();
        let top_minus = match kind {
            SplitKind::Stable => split.top_stable(),
            SplitKind::Unstable => split
                .sigma_c
                .iter()
                .chain(split.sigma_s.iter())
                .map(|p| p.value.re)
                .max_by(f64::total_cmp),
        }
        .ok_or_else(|| Error::Dichotomy("no eigenvalue computed in X^-".into()))?;
        let min_plus = proj.values().iter().map(|l| l.re).min_by(f64::total_cmp).unwrap_or(f64::INFINITY);
        let gamma = 1.0 / top_minus.abs().max(alpha.abs()).max(1.0);
        let lu = BandLu::<f64>::factor_shifted(op.matrix(), gamma, 1.0)?;
        Ok(RenormedNorm {
            matrix: op.matrix().clone(),
            proj: proj.clone(),
            frame: frame.clone(),
            alpha,
            beta,
            top_minus,
            min_plus,
            lu,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn projector(&self) -> &Projector {
        &self.proj
    }

    pub fn frame(&self) -> &PlusFrame {
        &self.frame
    }

    fn minus_horizon(&self) -> f64 {
        let rate = (self.alpha - self.top_minus).max(0.1 * self.top_minus.abs()).max(1e-8);
        10.0 / rate
    }

    /// Weighted curve `(t, e^{-alpha t} |S^-(t) v|)` on the final grid.
    pub fn minus_curve(&self, v: &[f64]) -> Result<Vec<(f64, f64)>> {
        let h = self.proj.mask().grid().h();
        if norm2(v) == 0.0 {
            return Ok(vec![(0.0, 0.0)]);
        }
        let mut prev: Option<(f64, Vec<(f64, f64)>)> = None;
        for k in [10usize, 20, 40, 80] {
            let kr = ResolventKrylov::build(
                v,
                k,
                |x| self.matrix.mul_vec(x),
                |x| self.lu.solve(x),
                |w| *w = self.proj.minus(w),
            );
            let cap = if self.min_plus.is_finite() { 0.5 * (self.top_minus + self.min_plus) } else { f64::INFINITY };
            let evaluator = CompressedExp::new(kr.compressed(), -1.0).with_rate_cap(cap);
            let beta_v = norm2(v);
            let curve = certified_curve(self.minus_horizon(), |t| {
                (-self.alpha * t).exp() * beta_v * h * evaluator.first_column_norm(t)
            })?;
            let sup = curve.iter().map(|p| p.1).fold(0.0, f64::max);
            let exhausted = kr.dim() < k;
            if let Some((ps, _)) = &prev {
                if (sup - ps).abs() <= 1e-8 * sup || exhausted {
                    return Ok(curve);
                }
            } else if exhausted {
                return Ok(curve);
            }
            prev = Some((sup, curve));
        }
        Ok(prev.unwrap().1)
    }

    /// `|v|_{X^-}` for `v` in `X^-`.
    pub fn minus(&self, v: &[f64]) -> Result<f64> {
        Ok(self.minus_curve(v)?.iter().map(|p| p.1).fold(0.0, f64::max))
    }

    /// `|F c|_{X^+}` for frame coordinates `c`.
    pub fn plus(&self, c: &[f64]) -> Result<f64> {
        if self.frame.d() == 0 || c.iter().all(|x| *x == 0.0) {
            return Ok(0.0);
        }
        let rate = (self.min_plus - self.beta).max(1e-8);
        let ev = CompressedExp::new(self.frame.reduced(), 1.0);
        let curve = certified_curve(10.0 / rate, |s| {
            // s >= 0 stands for t = -s
            let y = ev.apply(-s, c);
            (self.beta * s).exp() * self.frame.l2_norm(&y)
        })?;
        Ok(curve.iter().map(|p| p.1).fold(0.0, f64::max))
    }

    /// `|P^+ u|_{X^+}`.
    pub fn plus_of(&self, u: &[f64]) -> Result<f64> {
        self.plus(&self.frame.coords(u))
    }
}

/// Evaluates the weighted curve on `{0} U` a geometric grid up to `T`,
/// doubling `T` until the tail is below `TAIL_RATIO` of the running maximum
/// or the curve has reached a plateau.
fn certified_curve(t0: f64, f: impl Fn(f64) -> f64) -> Result<Vec<(f64, f64)>> {
    let mut t_max = t0;
    let mut ratio = f64::NAN;
    for _ in 0..=MAX_DOUBLINGS {
        let mut pts = vec![(0.0, f(0.0))];
        let t_min = 1e-5 * t_max;
        let q = (t_max / t_min).powf(1.0 / (CURVE_POINTS - 1) as f64);
        let mut t = t_min;
        for _ in 0..CURVE_POINTS {
            pts.push((t, f(t)));
            t *= q;
        }
        let peak = pts.iter().map(|p| p.1).fold(0.0, f64::max);
        if !peak.is_finite() {
            return Err(Error::Truncation { doublings: 0, ratio: f64::INFINITY });
        }
        let j = pts.len();
        let last = pts[j - 1].1;
        ratio = if peak > 0.0 { last / peak } else { 0.0 };
        let plateau = (pts[j - 1].1 - pts[j - 2].1).abs() <= PLATEAU_RTOL * last
            && (pts[j - 2].1 - pts[j - 3].1).abs() <= PLATEAU_RTOL * last;
        if ratio <= TAIL_RATIO || plateau {
            return Ok(pts);
        }
        t_max *= 2.0;
    }
    Err(Error::Truncation { doublings: MAX_DOUBLINGS, ratio })
}

/// `exp(sign * t * H) e_1` (or `exp(sign * t * H) c`) through an
/// eigendecomposition of a small matrix, with a Pade fallback when the
/// eigenvectors are ill-conditioned.
struct CompressedExp {
    h: Mat<f64>,
    sign: f64,
    eig: Option<(Vec<Complex64>, Mat<faer::c64>, Mat<faer::c64>)>,
    /// Modes with `sign * Re(theta)` above this are discarded.
    rate_cap: f64,
}

impl CompressedExp {
    fn new(h: &Mat<f64>, sign: f64) -> Self {
        let k = h.nrows();
        let eig = (k > 0).then(|| eig(h).ok()).flatten().and_then(|(vals, v)| {
            let inv = solve_complex(&v, &Mat::<faer::c64>::identity(k, k));
            // reject ill-conditioned eigenbases
            let mut err: f64 = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let mut s = Complex64::new(0.0, 0.0);
                    for l in 0..k {
                        s += v[(i, l)] * inv[(l, j)];
                    }
                    let target = if i == j { 1.0 } else { 0.0 };
                    err = err.max((s - target).norm());
                }
            }
            let vn = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max(v[(i, j)].norm()));
            let inn = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max(inv[(i, j)].norm()));
            (err < 1e-10 && vn * inn * (k as f64) < 1e6).then_some((vals, v, inv))
        });
        CompressedExp { h: h.clone(), sign, eig, rate_cap: f64::INFINITY }
    }

    /// Drops Ritz modes growing faster than `cap` (roundoff leaking past a
    /// spectral filter); only effective on the eigendecomposition path.
    fn with_rate_cap(mut self, cap: f64) -> Self {
        self.rate_cap = cap;
        self
    }

    fn apply(&self, t: f64, c: &[f64]) -> Vec<f64> {
        let k = self.h.nrows();
        match &self.eig {
            Some((vals, v, inv)) => {
                let y: Vec<Complex64> = (0..k)
                    .map(|i| {
                        if self.sign * vals[i].re > self.rate_cap {
                            return Complex64::new(0.0, 0.0);
                        }
                        (0..k).map(|j| inv[(i, j)] * c[j]).sum::<Complex64>() * (self.sign * t * vals[i]).exp()
                    })
                    .collect();
                (0..k).map(|i| (0..k).map(|j| v[(i, j)] * y[j]).sum::<Complex64>().re).collect()
            }
            None => {
                let e = expm(&Mat::from_fn(k, k, |i, j| self.sign * t * self.h[(i, j)]));
                mat_vec(&e, c)
            }
        }
    }

    fn first_column_norm(&self, t: f64) -> f64 {
        let k = self.h.nrows();
        let mut e1 = vec![0.0; k];
        if k > 0 {
            e1[0] = 1.0;
        }
        norm2(&self.apply(t, &e1))
    }
}

/// Fits `M1` and `M2` from 100 random vectors on each side (times 1.1) and
/// returns the constants together with the renormed norms.
pub fn fit_dichotomy(
    op: &EllipticOperator,
    proj: &Projector,
    frame: &PlusFrame,
    split: &SpectralSplit,
    exponents: (f64, f64, f64),
    seed: u64,
) -> Result<(DichotomyConstants, RenormedNorm)> {
    let kind = proj.kind();
    let (alpha, beta, sigma) = exponents;
    if !(beta > alpha) {
        return Err(Error::Dichotomy(format!("beta {beta} must exceed alpha {alpha}")));
    }
    let norms = RenormedNorm::new(op, proj, frame, split, alpha, beta)?;
    let mask = proj.mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m1: f64 = 1.0;
    for i in 0..100 {
        let x = if i % 2 == 0 { random_smooth_field(mask, &mut rng, 6) } else { random_white(mask.count(), &mut rng) };
        let v = proj.minus(&x);
        let nv = mask.l2_norm(&v);
        if nv > 0.0 {
            m1 = m1.max(norms.minus(&v)? / nv);
        }
    }
    let mut m2: f64 = 1.0;
    if frame.d() > 0 {
        for _ in 0..100 {
            let c: Vec<f64> = (0..frame.d()).map(|_| rng.sample(StandardNormal)).collect();
            let nc = frame.l2_norm(&c);
            if nc > 0.0 {
                m2 = m2.max(norms.plus(&c)? / nc);
            }
        }
    }
    Ok((DichotomyConstants { kind, alpha, beta, m1: 1.1 * m1, m2: 1.1 * m2, sigma_decay: sigma }, norms))
}

/// Random vectors of `X^-` (alternating smooth and white) and of `X^+`
/// (frame coordinates), as used by the sandwich checks.
pub fn random_minus_vectors(proj: &Projector, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mask = proj.mask();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let x = if i % 2 == 0 { random_smooth_field(mask, &mut rng, 6) } else { random_white(mask.count(), &mut rng) };
            proj.minus(&x)
        })
        .collect()
}

pub fn random_plus_coords(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Sandwich `|x|_{L^2} <= |x|_renormed <= M |x|_{L^2}` on fresh samples.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SandwichReport {
    pub samples: usize,
    pub minus_violations: usize,
    pub plus_violations: usize,
    /// Largest `|v|_- / |v|_{L^2}` and `|w|_+ / |w|_{L^2}` seen.
    pub minus_max_ratio: f64,
    pub plus_max_ratio: f64,
}

pub fn sandwich_check(
    norms: &RenormedNorm,
    dc: &DichotomyConstants,
    count: usize,
    seed: u64,
) -> Result<SandwichReport> {
    let proj = norms.projector();
    let frame = norms.frame();
    let mask = proj.mask();
    let tol = 1e-10;
    let mut rep = SandwichReport { samples: count, minus_violations: 0, plus_violations: 0, minus_max_ratio: 0.0, plus_max_ratio: 0.0 };
    for v in random_minus_vectors(proj, count, seed) {
        let l2 = mask.l2_norm(&v);
        if l2 == 0.0 {
            continue;
        }
        let r = norms.minus(&v)? / l2;
        rep.minus_max_ratio = rep.minus_max_ratio.max(r);
        if r < 1.0 - tol || r > dc.m1 * (1.0 + tol) {
            rep.minus_violations += 1;
        }
    }
    if frame.d() > 0 {
        for c in random_plus_coords(frame.d(), count, seed ^ 0x9e37) {
            let l2 = frame.l2_norm(&c);
            let r = norms.plus(&c)? / l2;
            rep.plus_max_ratio = rep.plus_max_ratio.max(r);
            if r < 1.0 - tol || r > dc.m2 * (1.0 + tol) {
                rep.plus_violations += 1;
            }
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::operators::{assemble, CoefficientSpec};
    use crate::spectral::{build_projector, compute_split, SplitOptions};
    use std::f64::consts::PI;

    fn laplace_op(m: usize, c0: f64) -> EllipticOperator {
        let g = GridSpec::unit(m).unwrap();
        assemble(&DomainMask::full(g), &CoefficientSpec::laplacian(c0).sample(&g)).unwrap()
    }

    #[test]
    fn cutoff_branches() {
        assert_eq!(cutoff_factor(0.5, 1.0), 1.0);
        assert_eq!(cutoff_factor(1.5, 1.0), 0.5);
        assert_eq!(cutoff_factor(3.0, 1.0), 0.0);
        assert_eq!(cutoff_factor(1.0, 1.0), 1.0);
        assert_eq!(cutoff_factor(2.0, 1.0), 0.0);
    }

    #[test]
    fn modified_f_agrees_inside_and_vanishes_outside() {
        let g = GridSpec::unit(7).unwrap();
        let mask = DomainMask::full(g);
        let nl = CutoffNonlinearity::new(Source::new(SourceKind::Cubic, 2.0), 0.5, None).unwrap();
        let u = mask.sample(|x, y| 0.3 * x * y);
        assert!(mask.l2_norm(&u) <= 0.5);
        let f = modified_f(&u, &nl, &mask);
        for (fi, ui) in f.iter().zip(&u) {
            assert_eq!(*fi, 2.0 * ui * ui * ui);
        }
        let big: Vec<f64> = u.iter().map(|x| x * 100.0).collect();
        assert!(modified_f(&big, &nl, &mask).iter().all(|x| *x == 0.0));
        assert!(modified_f(&vec![0.0; mask.count()], &nl, &mask).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn lipschitz_estimates() {
        let g = GridSpec::unit(15).unwrap();
        let mask = DomainMask::full(g);
        let zero = CutoffNonlinearity::new(Source::zero(), 0.1, None).unwrap();
        assert_eq!(estimate_lipschitz(&zero, &mask, 0.2, 50, 1), 0.0);
        let nl = CutoffNonlinearity::new(Source::new(SourceKind::Cubic, 1.0), 10.0, None).unwrap();
        let r = 0.4;
        let e1 = estimate_lipschitz(&nl, &mask, r, 200, 3);
        let e2 = estimate_lipschitz(&nl, &mask, r / 2.0, 200, 3);
        // cubic: the constant scales like r^2
        assert!(e2 / e1 <= 0.3, "{e1} {e2}");
        let e3 = estimate_lipschitz(&nl, &mask, 2.0 * r, 200, 3);
        assert!(e3 >= e1);
    }

    #[test]
    fn semigroup_decay_of_first_eigenvector() {
        let op = laplace_op(31, 0.0);
        let v = op.mask().sample(|x, y| (PI * x).sin() * (PI * y).sin());
        let t = 0.05;
        let u = semigroup_action(&op, &v, t, 1e-4).unwrap();
        let factor = (-2.0 * PI * PI * t).exp();
        for (a, b) in u.iter().zip(&v) {
            assert!((a - factor * b).abs() <= 0.01 * factor * b.abs() + 1e-14);
        }
        assert_eq!(semigroup_action(&op, &v, 0.0, 1e-4).unwrap(), v);
        assert!(matches!(semigroup_action(&op, &v, -1.0, 1e-4), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn semigroup_is_linear() {
        let op = laplace_op(11, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_white(op.dim(), &mut rng);
        let b = random_white(op.dim(), &mut rng);
        let s: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ua, ub, us) = (
            semigroup_action(&op, &a, 0.03, 1e-3).unwrap(),
            semigroup_action(&op, &b, 0.03, 1e-3).unwrap(),
            semigroup_action(&op, &s, 0.03, 1e-3).unwrap(),
        );
        for i in 0..op.dim() {
            assert!((us[i] - ua[i] - ub[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_flow_matches_semigroup_and_zero_is_fixed() {
        let op = laplace_op(15, 0.0);
        let nl = CutoffNonlinearity::new(Source::zero(), 1.0, None).unwrap();
        let flow = Semiflow::new(&op, &nl, Scheme::CnAb, 1e-3).unwrap();
        let v = op.mask().sample(|x, y| x * (1.0 - x) * y * (1.0 - y));
        let a = flow.flow(&v, 0.04).unwrap();
        let b = semigroup_action(&op, &v, 0.04, 1e-3).unwrap();
        assert!(norm2(&crate::linalg::sub(&a, &b)) < 1e-13);
        let cubic = CutoffNonlinearity::new(Source::new(SourceKind::Cubic, 1.0), 1.0, None).unwrap();
        let flow = Semiflow::new(&op, &cubic, Scheme::CnAb, 1e-3).unwrap();
        assert!(flow.flow(&vec![0.0; op.dim()], 0.1).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn exp_euler_is_first_order() {
        let op = laplace_op(11, -25.0);
        let nl = CutoffNonlinearity::new(Source::new(SourceKind::Cubic, 3.0), 10.0, None).unwrap();
        let u0 = op.mask().sample(|x, y| 0.5 * (PI * x).sin() * (PI * y).sin());
        let t = 0.1;
        let reference = Semiflow::new(&op, &nl, Scheme::CnAb, t / 2048.0).unwrap().flow(&u0, t).unwrap();
        let err = |dt: f64| {
            let u = Semiflow::new(&op, &nl, Scheme::ExpEuler, dt).unwrap().flow(&u0, t).unwrap();
            norm2(&crate::linalg::sub(&u, &reference))
        };
        let (e1, e2) = (err(t / 20.0), err(t / 40.0));
        let ratio = e1 / e2;
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
    }

    fn shifted_setup(kind: SplitKind) -> (EllipticOperator, Projector, SpectralSplit) {
        // sigma^u = {30 - 2 pi^2 (discrete)} ~ {10.26}
        let op = laplace_op(23, -30.0);
        let split = compute_split(&op, &SplitOptions::default()).unwrap();
        let proj = build_projector(&split, kind, &op).unwrap();
        (op, proj, split)
    }

    #[test]
    fn shifted_laplacian_exponents() {
        let (_, _, split) = shifted_setup(SplitKind::Unstable);
        let lu = split.sigma_u[0].value.re;
        assert!((lu - (30.0 - 2.0 * PI * PI)).abs() < 0.05, "{lu}");
        let (alpha, beta, _) = dichotomy_exponents(&split, SplitKind::Unstable, 1.0).unwrap();
        assert!(0.0 < alpha && alpha < beta && beta < lu);
        let (alpha, beta, sigma) = dichotomy_exponents(&split, SplitKind::Stable, 1.0).unwrap();
        assert!(alpha == -sigma && alpha < beta && beta < 0.0);
    }

    #[test]
    fn group_action_scalar_case() {
        let (op, proj, _) = shifted_setup(SplitKind::Unstable);
        let frame = PlusFrame::from_projector(&proj, &op).unwrap();
        let lu = proj.values()[0].re;
        for t in [-0.3, 0.0, 0.2] {
            let c = group_action_plus(&frame, &[1.5], t);
            assert!((c[0] - 1.5 * (lu * t).exp()).abs() < 1e-12 * (lu * t).exp().max(1.0));
        }
        // agrees with projecting the semigroup
        let w = frame.combine(&[1.0]);
        let s = semigroup_action(&op, &w, 0.05, 1e-5).unwrap();
        let c = frame.coords(&s);
        assert!((c[0] - group_action_plus(&frame, &[1.0], 0.05)[0]).abs() < 1e-6 * c[0]);
    }

    #[test]
    fn self_adjoint_fit_gives_unit_constants_and_sandwiches() {
        for kind in [SplitKind::Unstable, SplitKind::Stable] {
            let (op, proj, split) = shifted_setup(kind);
            let frame = PlusFrame::from_projector(&proj, &op).unwrap();
            let (dc, norms) = fit_dichotomy(&op, &proj, &frame, &split, dichotomy_exponents(&split, kind, 1.0).unwrap(), 11).unwrap();
            assert!(dc.m1 <= 1.2 && dc.m2 <= 1.2, "{dc:?}");
            for v in random_minus_vectors(&proj, 10, 99) {
                let n = proj.mask().l2_norm(&v);
                let r = norms.minus(&v).unwrap();
                assert!(n <= r * (1.0 + 1e-12) && r <= dc.m1 * n);
            }
            assert_eq!(norms.minus(&vec![0.0; op.dim()]).unwrap(), 0.0);
        }
    }

    #[test]
    fn eigenvector_with_rate_alpha_has_unit_renormed_norm() {
        // stable split: alpha = -sigma is the top stable eigenvalue itself
        let (op, proj, split) = shifted_setup(SplitKind::Stable);
        let frame = PlusFrame::from_projector(&proj, &op).unwrap();
        let (alpha, beta, _) = dichotomy_exponents(&split, SplitKind::Stable, 1.0).unwrap();
        let norms = RenormedNorm::new(&op, &proj, &frame, &split, alpha, beta).unwrap();
        let top = &split.sigma_s[0];
        let v: Vec<f64> = top.right.iter().map(|z| z.re).collect();
        let v = proj.minus(&v);
        let n = proj.mask().l2_norm(&v);
        let r = norms.minus(&v).unwrap();
        assert!((r / n - 1.0).abs() < 1e-6, "{}", r / n);
    }

    #[test]
    fn non_normal_sandwiches() {
        let g = GridSpec::unit(19).unwrap();
        let mut spec = CoefficientSpec::anisotropic(-45.0, 1.0);
        spec.advection = [crate::operators::ScalarField::constant(5.0), crate::operators::ScalarField::constant(3.0)];
        let op = assemble(&DomainMask::full(g), &spec.sample(&g)).unwrap();
        let split = compute_split(&op, &SplitOptions::default()).unwrap();
        for kind in [SplitKind::Unstable, SplitKind::Stable] {
            let proj = build_projector(&split, kind, &op).unwrap();
            let frame = PlusFrame::from_projector(&proj, &op).unwrap();
            let (dc, norms) = fit_dichotomy(&op, &proj, &frame, &split, dichotomy_exponents(&split, kind, 1.0).unwrap(), 3).unwrap();
            for v in random_minus_vectors(&proj, 20, 4) {
                let n = proj.mask().l2_norm(&v);
                let r = norms.minus(&v).unwrap();
                assert!(n <= r * (1.0 + 1e-10) && r <= dc.m1 * n, "{n} {r} {}", dc.m1);
            }
            for c in random_plus_coords(frame.d(), 20, 5) {
                let n = frame.l2_norm(&c);
                let r = norms.plus(&c).unwrap();
                assert!(n <= r * (1.0 + 1e-10) && r <= dc.m2 * n);
            }
        }
    }

    #[test]
    fn trajectory_rows() {
        let (op, proj, _) = shifted_setup(SplitKind::Unstable);
        let nl = CutoffNonlinearity::new(Source::new(SourceKind::Cubic, 1.0), 0.5, None).unwrap();
        let cfg = SemiflowConfig { dt: 1e-3, scheme: Scheme::CnAb, t_horizon: 0.01 };
        let u0 = op.mask().sample(|x, y| 0.01 * (PI * x).sin() * (PI * y).sin());
        let tr = evolve(&cfg, &op, &nl, &u0, 0.01, 2).unwrap();
        let rows = tr.norm_rows(&proj);
        assert_eq!(rows[0][0], 0.0);
        assert!((rows.last().unwrap()[0] - 0.01).abs() < 1e-15);
        assert!(rows.iter().all(|r| r[1] <= r[2] + r[3] + 1e-15));
    }
}
