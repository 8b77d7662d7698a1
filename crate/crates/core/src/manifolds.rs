//! Local unstable manifolds by the graph transform and local stable
//! manifolds by cone-exit shooting, for the cut-off semiflow.
//!
//! Graphs are parametrized by coordinates in a basis of `X^+`. Cone tests
//! and Lipschitz constants use the renormed norms; patch radii use `L^2`.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    dichotomy_exponents, fit_dichotomy, random_smooth_field, CutoffNonlinearity, DichotomyConstants, PlusFrame,
    RenormedNorm, Scheme, SemiflowConfig, Semiflow,
};
use crate::geometry::DomainMask;
use crate::linalg::{expm, mat_vec, norm2, sub};
use crate::operators::EllipticOperator;
use crate::spectral::{build_projector, pushforward_basis, Projector, SpectralSplit, SplitKind, SubspaceBasis, CONDITIONING_MIN};
use crate::{Error, Result};

/// Cone openings `mu < 1 < nu` and rate `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub feasible: bool,
}

const MU_GRID: [f64; 3] = [0.5, 0.25, 0.1];
const NU_GRID: [f64; 3] = [2.0, 4.0, 10.0];

/// Searches `(mu, nu)` on a fixed grid for a pair satisfying
/// `eps < (beta - alpha) / (2 + nu + 1/mu)` with a nonempty intersection of
/// `(-beta + 2 eps, -alpha - 2 eps)` and
/// `(eps (1 + 1/mu) - beta, -eps (1 + nu) - alpha)`; `gamma` is the midpoint
/// of that intersection.
pub fn select_cone_params(dc: &DichotomyConstants, epsilon: f64) -> Result<ConeParams> {
    select_cone_params_for(dc.alpha, dc.beta, epsilon)
}

pub fn select_cone_params_for(alpha: f64, beta: f64, epsilon: f64) -> Result<ConeParams> {
    if !(beta > alpha) {
        return Err(Error::Infeasible(format!("beta = {beta} must exceed alpha = {alpha}")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Infeasible(format!("epsilon = {epsilon} must be nonnegative")));
    }
    if epsilon >= (beta - alpha) / 4.0 {
        return Err(Error::Infeasible(format!(
            "epsilon = {epsilon:.4e} violates epsilon < (beta - alpha)/4 = {:.4e}; reduce the cutoff radius delta",
            (beta - alpha) / 4.0
        )));
    }
    let mut last = String::new();
    for mu in MU_GRID {
        for nu in NU_GRID {
            let bound = (beta - alpha) / (2.0 + nu + 1.0 / mu);
            if epsilon >= bound {
                last = format!("epsilon < (beta - alpha)/(2 + nu + 1/mu) = {bound:.4e} fails for mu = {mu}, nu = {nu}");
                continue;
            }
            let lo = (-beta + 2.0 * epsilon).max(epsilon * (1.0 + 1.0 / mu) - beta);
            let hi = (-alpha - 2.0 * epsilon).min(-epsilon * (1.0 + nu) - alpha);
            if lo < hi {
                return Ok(ConeParams { mu, nu, gamma: 0.5 * (lo + hi), epsilon, feasible: true });
            }
            last = format!("empty gamma interval ({lo:.4e}, {hi:.4e}) for mu = {mu}, nu = {nu}");
        }
    }
    Err(Error::Infeasible(format!("{last}; reduce the cutoff radius delta")))
}

/// Closed cone `lambda |v|_- <= |w|_+`.
pub fn cone_membership(v_norm_minus: f64, w_norm_plus: f64, lambda: f64) -> bool {
    assert!(lambda > 0.0, "cone opening must be positive");
    lambda * v_norm_minus <= w_norm_plus
}

/// Contraction schedule of the graph transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSchedule {
    pub t_map: f64,
    pub k: f64,
    pub m_max: usize,
    pub tol: f64,
    pub m0: usize,
}

/// `nu / (nu - mu) * exp((alpha - beta + eps (2 + mu + 1/nu)) t)`.
pub fn contraction_constant(alpha: f64, beta: f64, cone: &ConeParams, t: f64) -> f64 {
    let (mu, nu, eps) = (cone.mu, cone.nu, cone.epsilon);
    nu / (nu - mu) * ((alpha - beta + eps * (2.0 + mu + 1.0 / nu)) * t).exp()
}

/// The time at which the contraction constant equals `target`.
pub fn time_for_contraction(alpha: f64, beta: f64, cone: &ConeParams, target: f64) -> Result<f64> {
    let (mu, nu, eps) = (cone.mu, cone.nu, cone.epsilon);
    let rate = alpha - beta + eps * (2.0 + mu + 1.0 / nu);
    if !(rate < 0.0) {
        return Err(Error::Infeasible(format!("contraction exponent {rate:.4e} is not negative")));
    }
    Ok((target * (nu - mu) / nu).ln() / rate)
}

/// Iterations needed for `K^m0 / (1 - K) * 2/nu <= tol`.
pub fn iterations_needed(k: f64, nu: f64, tol: f64) -> usize {
    ((tol * (1.0 - k) / (2.0 / nu)).ln() / k.ln()).ceil().max(0.0) as usize
}

pub fn schedule(alpha: f64, beta: f64, cone: &ConeParams, t_map: Option<f64>, tol: f64, m_max: usize) -> Result<FixedPointSchedule> {
    let t = match t_map {
        Some(t) => t,
        None => time_for_contraction(alpha, beta, cone, 0.5)?,
    };
    let k = contraction_constant(alpha, beta, cone, t);
    if !(k < 1.0) {
        return Err(Error::Infeasible(format!("contraction constant K = {k:.4} >= 1 at t = {t:.4e}; increase t_map")));
    }
    Ok(FixedPointSchedule { t_map: t, k, m_max, tol, m0: iterations_needed(k, cone.nu, tol) })
}

/// A graph over the `X^+` coordinate cube `[-R, R]^d` sampled on a tensor
/// mesh with `2N + 1` nodes per axis, values in `X^-`, multilinear in between.
#[derive(Debug, Clone)]
pub struct GraphFunction {
    d: usize,
    radius: f64,
    half: usize,
    values: Vec<Vec<f64>>,
    /// Lipschitz constant in renormed norms measured over mesh edges.
    pub lip: f64,
    /// Pre-images of the nodes under the last transform, with its time.
    preimages: Option<(f64, Vec<Vec<f64>>)>,
}

impl GraphFunction {
    pub fn zero(d: usize, radius: f64, half: usize, n: usize) -> Result<Self> {
        if d == 0 || d > 2 {
            return Err(Error::UnsupportedDimension(d));
        }
        let count = (2 * half + 1).pow(d as u32);
        Ok(GraphFunction { d, radius, half, values: vec![vec![0.0; n]; count], lip: 0.0, preimages: None })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn half(&self) -> usize {
        self.half
    }

    pub fn node_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn side(&self) -> usize {
        2 * self.half + 1
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        let s = self.side();
        let step = self.radius / self.half as f64;
        let mut out = Vec::with_capacity(self.d);
        let mut r = idx;
        for _ in 0..self.d {
            out.push(((r % s) as f64 - self.half as f64) * step);
            r /= s;
        }
        out
    }

    fn centre_index(&self) -> usize {
        let s = self.side();
        (0..self.d).map(|k| self.half * s.pow(k as u32)).sum()
    }

    /// Multilinear interpolation; `None` outside the mesh.
    pub fn eval(&self, c: &[f64]) -> Option<Vec<f64>> {
        let s = self.side();
        let step = self.radius / self.half as f64;
        let mut base = Vec::with_capacity(self.d);
        let mut frac = Vec::with_capacity(self.d);
        for &x in c {
            let pos = x / step + self.half as f64;
            if !(pos >= -1e-9 && pos <= (s - 1) as f64 + 1e-9) {
                return None;
            }
            let i = (pos.floor().max(0.0) as usize).min(s - 2);
            base.push(i);
            frac.push((pos - i as f64).clamp(0.0, 1.0));
        }
        let n = self.values[0].len();
        let mut out = vec![0.0; n];
        for corner in 0..(1usize << self.d) {
            let mut w = 1.0;
            let mut idx = 0;
            let mut stride = 1;
            for k in 0..self.d {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx += (base[k] + bit) * stride;
                stride *= s;
            }
            if w != 0.0 {
                crate::linalg::axpy(w, &self.values[idx], &mut out);
            }
        }
        Some(out)
    }

    /// Mesh edges (axis neighbours and, for `d = 2`, cell diagonals).
    fn edges(&self) -> Vec<(usize, usize)> {
        let s = self.side();
        let mut e = Vec::new();
        match self.d {
            1 => (0..s - 1).for_each(|i| e.push((i, i + 1))),
            _ => {
                for j in 0..s {
                    for i in 0..s {
                        let k = i + s * j;
                        if i + 1 < s {
                            e.push((k, k + 1));
                        }
                        if j + 1 < s {
                            e.push((k, k + s));
                        }
                        if i + 1 < s && j + 1 < s {
                            e.push((k, k + s + 1));
                            e.push((k + 1, k + s));
                        }
                    }
                }
            }
        }
        e
    }
}

/// User-facing knobs of the manifold constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSettings {
    /// Radius of the `X^+` mesh (unstable) or of the `X^-` sample ball (stable).
    pub r_mesh: f64,
    /// Mesh nodes per half axis.
    pub mesh_half: usize,
    pub tol: f64,
    pub m_max: usize,
    pub t_map: Option<f64>,
    pub t_stab: Option<f64>,
    pub directions: usize,
    pub radii: usize,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    /// Stable decay rate as a fraction of the computed stable gap.
    pub sigma_fraction: f64,
    pub scheme: Scheme,
    pub dt: Option<f64>,
    /// Set from the run seed, never read from configuration.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        ManifoldSettings {
            r_mesh: 0.05,
            mesh_half: 8,
            tol: 1e-9,
            m_max: 40,
            t_map: None,
            t_stab: None,
            directions: 16,
            radii: 4,
            delta1: None,
            delta2: None,
            sigma_fraction: 0.25,
            scheme: Scheme::CnAb,
            dt: None,
            seed: 7,
        }
    }
}

/// Parameters shared by all members of a family (taken from the limit problem).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
    pub cone: ConeParams,
    pub delta_hat: f64,
    pub t_map: f64,
    pub t_stab: f64,
    pub dt: f64,
}

/// Limit-problem data needed to set up a perturbed problem consistently.
#[derive(Debug, Clone)]
pub struct Reference {
    pub params: UniformParams,
    pub basis: SubspaceBasis,
}

/// Everything needed to build one manifold patch on one domain.
pub struct ManifoldProblem {
    pub kind: SplitKind,
    pub op: EllipticOperator,
    pub nl: CutoffNonlinearity,
    pub split: SpectralSplit,
    pub proj: Projector,
    pub frame: PlusFrame,
    pub norms: RenormedNorm,
    pub dichotomy: DichotomyConstants,
    pub cone: ConeParams,
    pub settings: ManifoldSettings,
    pub delta1: f64,
    pub delta2: f64,
    pub delta_hat: f64,
    pub t_stab: f64,
    pub dt: f64,
    pub t_map: Option<f64>,
}

impl ManifoldProblem {
    /// Sets up the split, the renormed norms and the cone parameters. With a
    /// reference, the exponents, cone, `delta_hat`, `t_map`, `T_stab` and `dt`
    /// are taken from it and the `X^+` basis is pushed forward from it.
    pub fn prepare(
        op: &EllipticOperator,
        nl: &CutoffNonlinearity,
        split: &SpectralSplit,
        kind: SplitKind,
        settings: &ManifoldSettings,
        reference: Option<&Reference>,
    ) -> Result<Self> {
        let proj = build_projector(split, kind, op)?;
        let frame = match reference {
            Some(r) => {
                let basis = pushforward_basis(&r.basis, &proj, CONDITIONING_MIN)?;
                PlusFrame::with_basis(&proj, op, &basis)?
            }
            None => PlusFrame::from_projector(&proj, op)?,
        };
        let exponents = match reference {
            Some(r) => (r.params.alpha, r.params.beta, r.params.sigma),
            None => dichotomy_exponents(split, kind, settings.sigma_fraction)?,
        };
        let clock = std::time::Instant::now();
        let (dichotomy, norms) = fit_dichotomy(op, &proj, &frame, split, exponents, settings.seed ^ 0xd1c4)?;
        log::debug!("{}: dichotomy fit in {:.2?}", op.mask().label(), clock.elapsed());
        let cone = match reference {
            Some(r) => r.params.cone,
            None => select_cone_params(&dichotomy, nl.epsilon)?,
        };
        let r = settings.r_mesh;
        let (d1, d2) = match kind {
            SplitKind::Unstable => (settings.delta1.unwrap_or(2.0 * r), settings.delta2.unwrap_or(r)),
            SplitKind::Stable => (settings.delta1.unwrap_or(r), settings.delta2.unwrap_or(2.0 * r)),
        };
        let delta_hat = match reference {
            Some(r) => r.params.delta_hat,
            None => {
                let pm = proj.norm_minus().max(f64::MIN_POSITIVE);
                let pp = proj.norm_plus();
                let a = d1 / (dichotomy.m1 * pm);
                let b = if pp > 0.0 { d2 / (dichotomy.m2 * pp) } else { f64::INFINITY };
                a.min(b)
            }
        };
        let gap = -split.top_stable().unwrap_or(-1.0);
        let t_stab = match reference {
            Some(r) => r.params.t_stab,
            None => settings.t_stab.unwrap_or(10.0 / gap),
        };
        let dt = match reference {
            Some(r) => r.params.dt,
            None => settings.dt.unwrap_or_else(|| SemiflowConfig::default_dt(split)),
        };
        let t_map = match reference {
            Some(r) => Some(r.params.t_map),
            None => settings.t_map,
        };
        Ok(ManifoldProblem {
            kind,
            op: op.clone(),
            nl: nl.clone(),
            split: split.clone(),
            proj,
            frame,
            norms,
            dichotomy,
            cone,
            settings: settings.clone(),
            delta1: d1,
            delta2: d2,
            delta_hat,
            t_stab,
            dt,
            t_map,
        })
    }

    pub fn mask(&self) -> &DomainMask {
        self.proj.mask()
    }

    pub fn semiflow(&self) -> Result<Semiflow<'_>> {
        Semiflow::new(&self.op, &self.nl, self.settings.scheme, self.dt)
    }

    pub fn schedule(&self) -> Result<FixedPointSchedule> {
        schedule(self.dichotomy.alpha, self.dichotomy.beta, &self.cone, self.t_map, self.settings.tol, self.settings.m_max)
    }

    /// Parameters to impose on perturbed problems.
    pub fn uniform_params(&self) -> Result<UniformParams> {
        Ok(UniformParams {
            alpha: self.dichotomy.alpha,
            beta: self.dichotomy.beta,
            sigma: self.dichotomy.sigma_decay,
            cone: self.cone,
            delta_hat: self.delta_hat,
            t_map: self.schedule()?.t_map,
            t_stab: self.t_stab,
            dt: self.dt,
        })
    }

    pub fn reference(&self) -> Result<Reference> {
        Ok(Reference {
            params: self.uniform_params()?,
            basis: SubspaceBasis { mask: self.mask().clone(), vectors: self.frame.vectors().to_vec(), conditioning: 1.0 },
        })
    }

    /// `|P^- u|_{X^-}` and `|P^+ u|_{X^+}` of a state.
    pub fn split_norms(&self, u: &[f64]) -> Result<(f64, f64)> {
        let c = self.frame.coords(u);
        let v = sub(u, &self.frame.combine(&c));
        Ok((self.norms.minus(&v)?, self.norms.plus(&c)?))
    }

    /// Cone membership with `L^2` sandwich pre-tests; the renormed `X^-` norm
    /// is evaluated only when the bounds are inconclusive.
    pub fn in_cone(&self, u: &[f64], lambda: f64) -> Result<bool> {
        let c = self.frame.coords(u);
        let v = sub(u, &self.frame.combine(&c));
        let wn = self.norms.plus(&c)?;
        let vl2 = self.mask().l2_norm(&v);
        if lambda * vl2 > wn {
            return Ok(false);
        }
        if lambda * self.dichotomy.m1 * vl2 <= wn {
            return Ok(true);
        }
        Ok(cone_membership(self.norms.minus(&v)?, wn, lambda))
    }

    /// Distance `sup_{c != 0} |h1(c) - h2(c)|_- / |c|_+` over mesh nodes.
    pub fn lip_distance(&self, h1: &GraphFunction, h2: &GraphFunction) -> Result<f64> {
        let centre = h1.centre_index();
        let vals: Vec<f64> = (0..h1.node_count())
            .into_par_iter()
            .filter(|&i| i != centre)
            .map(|i| {
                let c = h1.node_coords(i);
                let dv = sub(&h1.values[i], &h2.values[i]);
                if norm2(&dv) == 0.0 {
                    return Ok(0.0);
                }
                Ok(self.norms.minus(&dv)? / self.norms.plus(&c)?)
            })
            .collect::<Result<_>>()?;
        Ok(vals.into_iter().fold(0.0, f64::max))
    }

    /// Lipschitz constant of a graph over its mesh edges, in renormed norms.
    pub fn graph_lipschitz(&self, h: &GraphFunction) -> Result<f64> {
        let vals: Vec<f64> = h
            .edges()
            .into_par_iter()
            .map(|(a, b)| {
                let dv = sub(&h.values[a], &h.values[b]);
                if norm2(&dv) == 0.0 {
                    return Ok(0.0);
                }
                let dc = sub(&h.node_coords(a), &h.node_coords(b));
                Ok(self.norms.minus(&dv)? / self.norms.plus(&dc)?)
            })
            .collect::<Result<_>>()?;
        Ok(vals.into_iter().fold(0.0, f64::max))
    }

    /// `max |h(c)|_- / |c|_+` over coordinate directions `c` of Euclidean length `r`.
    pub fn secant_slope(&self, h: &GraphFunction, r: f64) -> Result<f64> {
        let dirs: Vec<Vec<f64>> = match h.d {
            1 => vec![vec![1.0], vec![-1.0]],
            _ => (0..16).map(|k| {
                let a = k as f64 * std::f64::consts::PI / 8.0;
                vec![a.cos(), a.sin()]
            }).collect(),
        };
        let mut best: f64 = 0.0;
        for dir in dirs {
            let c: Vec<f64> = dir.iter().map(|x| x * r).collect();
            let v = h.eval(&c).ok_or_else(|| Error::GraphTransform(format!("radius {r} outside the mesh")))?;
            best = best.max(self.norms.minus(&v)? / self.norms.plus(&c)?);
        }
        Ok(best)
    }

    /// One application of `T_t`: flows the graph and re-samples it on the
    /// mesh. Each node `c` is hit exactly by solving `P^+ Phi_t(p + h(p)) = c`
    /// for the pre-image `p`, starting from `exp(-R t) c` or from the
    /// pre-images of the previous application.
    pub fn graph_transform(&self, h: &GraphFunction, t: f64) -> Result<GraphFunction> {
        let d = h.d;
        let flow = self.semiflow()?;
        let pre = expm(&Mat::from_fn(d, d, |i, j| -t * self.frame.reduced()[(i, j)]));
        let centre = h.centre_index();
        let radius = h.radius;
        let warm = h.preimages.as_ref().filter(|(tw, _)| *tw == t).map(|(_, p)| p);
        let solved: Vec<(Vec<f64>, Vec<f64>)> = (0..h.node_count())
            .into_par_iter()
            .map(|i| {
                if i == centre {
                    return Ok((vec![0.0; h.values[0].len()], vec![0.0; d]));
                }
                let target = h.node_coords(i);
                let p0 = match warm {
                    Some(w) => w[i].clone(),
                    None => mat_vec(&pre, &target),
                };
                let (p, v, res) = broyden(&p0, &pre, 1e-12 * radius, 8, |p| {
                    let hp = h.eval(p).ok_or_else(|| {
                        Error::GraphTransform(
                            "P+ Phi_t(graph h) does not cover the mesh; increase t_map or reduce r_mesh".into(),
                        )
                    })?;
                    let mut u = self.frame.combine(p);
                    crate::linalg::axpy(1.0, &hp, &mut u);
                    let ut = flow.flow(&u, t)?;
                    let c = self.frame.coords(&ut);
                    let v = sub(&ut, &self.frame.combine(&c));
                    Ok((sub(&c, &target), v))
                })?;
                if res > 1e-8 * radius {
                    return Err(Error::GraphTransform(format!(
                        "pre-image correction stalled (residual {res:.2e}); increase t_map or reduce r_mesh"
                    )));
                }
                Ok((v, p))
            })
            .collect::<Result<_>>()?;
        let (values, pres): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
        let mut out = GraphFunction { d, radius, half: h.half, values, lip: 0.0, preimages: Some((t, pres)) };
        let lip = self.graph_lipschitz(&out)?;
        let cap = 1.0 / self.cone.nu;
        if lip > cap {
            let s = cap / lip;
            log::warn!("graph Lipschitz constant {lip:.3e} exceeds 1/nu; clamping");
            out.values.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
            out.lip = cap;
        } else {
            out.lip = lip;
        }
        Ok(out)
    }

    /// Iterates the graph transform from `h = 0`.
    pub fn unstable_manifold(&self) -> Result<ManifoldPatch> {
        if self.kind != SplitKind::Unstable {
            return Err(Error::GraphTransform("the unstable manifold needs the unstable split".into()));
        }
        let d = self.frame.d();
        let sched = self.schedule()?;
        let mut h = GraphFunction::zero(d, self.settings.r_mesh, self.settings.mesh_half, self.mask().count())?;
        let mut distances = Vec::new();
        let mut ratios = Vec::new();
        let mut converged = false;
        for _ in 0..sched.m_max {
            let next = self.graph_transform(&h, sched.t_map)?;
            let dist = self.lip_distance(&next, &h)?;
            if let Some(prev) = distances.last() {
                ratios.push(if *prev > 0.0 { dist / prev } else { 0.0 });
            }
            distances.push(dist);
            h = next;
            let n = ratios.len();
            if n >= 3 && ratios[n - 3..].iter().all(|r| *r >= 1.0) {
                return Err(Error::NonContraction { ratios });
            }
            if dist < sched.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::GraphTransform(format!(
                "no convergence to {:.1e} within {} iterations (last distance {:.3e})",
                sched.tol,
                sched.m_max,
                distances.last().copied().unwrap_or(f64::NAN)
            )));
        }
        let iterations = distances.len();
        if iterations > sched.m0 + 3 {
            log::warn!("{iterations} iterations exceed the a priori count m0 = {}", sched.m0);
        }
        let mut samples = Vec::new();
        for i in 0..h.node_count() {
            let c = h.node_coords(i);
            let mut u = self.frame.combine(&c);
            crate::linalg::axpy(1.0, &h.values[i], &mut u);
            let norm = self.mask().l2_norm(&u);
            if norm <= self.delta_hat {
                samples.push(PatchSample { coords: c, full: self.mask().extend_by_zero(&u)?, norm });
            }
        }
        let r = self.settings.r_mesh;
        let slope_outer = self.secant_slope(&h, r)?;
        let slope_inner = self.secant_slope(&h, r / 4.0)?;
        Ok(ManifoldPatch {
            kind: SplitKind::Unstable,
            samples,
            graph: Some(h.clone()),
            meta: self.metadata(Some(sched), PatchDiagnostics {
                iterations,
                distances,
                ratios,
                lipschitz: h.lip,
                tangency: [slope_inner, slope_outer],
                ..PatchDiagnostics::default()
            }),
        })
    }

    /// `h^-(v0)`: the `X^+` part `w` whose trajectory from `v0 + F w` has no
    /// unstable component at `T_stab`, i.e. `P^+ Phi_T(v0 + F w) = 0`. Any
    /// other `w` leaves the cone at a rate `exp(min Re sigma^+ T)`, so this is
    /// the finite-horizon form of staying in the cone for all time.
    pub fn stable_shoot(&self, v0: &[f64]) -> Result<Vec<f64>> {
        let d = self.frame.d();
        if d == 0 || norm2(v0) == 0.0 {
            return Ok(vec![0.0; d]);
        }
        let flow = self.semiflow()?;
        let t = self.t_stab;
        let jinv = expm(&Mat::from_fn(d, d, |i, j| -t * self.frame.reduced()[(i, j)]));
        let scale = self.mask().l2_norm(v0);
        let (w, _, res) = broyden(&vec![0.0; d], &jinv, 1e-12 * scale, 12, |w| {
            let mut u = v0.to_vec();
            crate::linalg::axpy(1.0, &self.frame.combine(w), &mut u);
            let ut = flow.flow(&u, t)?;
            Ok((self.frame.coords(&ut), ()))
        })?;
        if res > 1e-8 * scale {
            return Err(Error::Shooting(format!(
                "unstable component at T_stab stalled at {res:.2e}; shrink |v0| or T_stab"
            )));
        }
        Ok(w)
    }

    /// Unit directions of `X^-`: `P^-` of fixed smooth fields on the box,
    /// restricted to this domain. Identical seeds give corresponding
    /// directions on every domain of a family.
    pub fn stable_directions(&self) -> Result<Vec<Vec<f64>>> {
        let grid = *self.mask().grid();
        let full = DomainMask::full(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed ^ 0x57ab1e);
        let mut out = Vec::with_capacity(self.settings.directions);
        for _ in 0..self.settings.directions {
            let s = random_smooth_field(&full, &mut rng, 6);
            let r = self.mask().restrict_from(&s, &full)?;
            let v = self.proj.minus(&r);
            let n = self.mask().l2_norm(&v);
            out.push(v.iter().map(|x| x / n).collect());
        }
        Ok(out)
    }

    /// Samples of the local stable manifold along fixed directions and radii.
    pub fn stable_manifold(&self) -> Result<ManifoldPatch> {
        if self.kind != SplitKind::Stable {
            return Err(Error::Shooting("the stable manifold needs the stable split".into()));
        }
        let dirs = self.stable_directions()?;
        let nr = self.settings.radii.max(1);
        let rho_max = 0.9 * self.delta_hat.min(self.settings.r_mesh);
        let jobs: Vec<(usize, usize)> = (0..dirs.len()).flat_map(|j| (1..=nr).map(move |k| (j, k))).collect();
        let shots: Vec<(usize, f64, Vec<f64>, Vec<f64>)> = jobs
            .into_par_iter()
            .map(|(j, k)| {
                let rho = rho_max * k as f64 / nr as f64;
                let v0: Vec<f64> = dirs[j].iter().map(|x| x * rho).collect();
                let w = self.stable_shoot(&v0)?;
                Ok((j, rho, v0, w))
            })
            .collect::<Result<_>>()?;
        let n = self.mask().count();
        let mut samples = vec![PatchSample { coords: vec![-1.0, 0.0], full: vec![0.0; self.mask().grid().node_count()], norm: 0.0 }];
        let mut max_ratio: f64 = 0.0;
        let mut cone_ok = true;
        for (j, rho, v0, w) in &shots {
            let mut u = v0.clone();
            crate::linalg::axpy(1.0, &self.frame.combine(w), &mut u);
            let norm = self.mask().l2_norm(&u);
            let wn = self.norms.plus(w)?;
            let vn = self.norms.minus(v0)?;
            cone_ok &= wn <= self.cone.mu * vn * (1.0 + 1e-9);
            if norm <= self.delta_hat {
                samples.push(PatchSample { coords: vec![*j as f64, *rho], full: self.mask().extend_by_zero(&u)?, norm });
            }
            let _ = n;
        }
        // Lipschitz estimate over radial neighbours and angular neighbours
        let mut pairs = Vec::new();
        for a in 0..shots.len() {
            for b in a + 1..shots.len() {
                let (ja, ra) = (shots[a].0, shots[a].1);
                let (jb, rb) = (shots[b].0, shots[b].1);
                let radial = ja == jb && ((ra - rb).abs() - rho_max / nr as f64).abs() < 1e-12 * rho_max;
                let angular = ra == rb && (jb == ja + 1);
                if radial || angular {
                    pairs.push((a, b));
                }
            }
        }
        for j in 0..dirs.len() {
            if let Some(a) = shots.iter().position(|s| s.0 == j) {
                pairs.push((a, usize::MAX));
            }
        }
        let ratios: Vec<f64> = pairs
            .into_par_iter()
            .map(|(a, b)| {
                let (va, wa) = (&shots[a].2, &shots[a].3);
                let zero_v = vec![0.0; va.len()];
                let zero_w = vec![0.0; wa.len()];
                let (vb, wb) = if b == usize::MAX { (&zero_v, &zero_w) } else { (&shots[b].2, &shots[b].3) };
                let dv = self.norms.minus(&sub(va, vb))?;
                let dw = self.norms.plus(&sub(wa, wb))?;
                Ok(if dv > 0.0 { dw / dv } else { 0.0 })
            })
            .collect::<Result<_>>()?;
        for r in ratios {
            max_ratio = max_ratio.max(r);
        }
        if max_ratio > 1.2 * self.cone.mu {
            log::warn!("stable graph Lipschitz estimate {max_ratio:.3e} exceeds 1.2 mu");
        }
        let max_plus = shots.iter().map(|s| self.frame.l2_norm(&s.3)).fold(0.0, f64::max);
        Ok(ManifoldPatch {
            kind: SplitKind::Stable,
            samples,
            graph: None,
            meta: self.metadata(None, PatchDiagnostics {
                lipschitz: max_ratio,
                cone_ok,
                max_plus_part: max_plus,
                ..PatchDiagnostics::default()
            }),
        })
    }

    fn metadata(&self, sched: Option<FixedPointSchedule>, diagnostics: PatchDiagnostics) -> PatchMeta {
        PatchMeta {
            kind: self.kind,
            domain: self.mask().label().to_string(),
            d: self.frame.d(),
            alpha: self.dichotomy.alpha,
            beta: self.dichotomy.beta,
            gamma: self.cone.gamma,
            mu: self.cone.mu,
            nu: self.cone.nu,
            epsilon: self.cone.epsilon,
            epsilon_measured: self.nl.epsilon,
            epsilon_local: self.nl.local_epsilon,
            delta: self.nl.delta,
            m1: self.dichotomy.m1,
            m2: self.dichotomy.m2,
            delta1: self.delta1,
            delta2: self.delta2,
            delta_hat: self.delta_hat,
            r_mesh: self.settings.r_mesh,
            k: sched.map(|s| s.k),
            t_map: sched.map(|s| s.t_map),
            m0: sched.map(|s| s.m0),
            t_stab: self.t_stab,
            dt: self.dt,
            diagnostics,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PatchSample {
    /// `X^+` coordinates (unstable) or `[direction, radius]` (stable; the
    /// origin is `[-1, 0]`).
    pub coords: Vec<f64>,
    /// The point zero-extended to the whole grid.
    pub full: Vec<f64>,
    /// `L^2` norm.
    pub norm: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PatchDiagnostics {
    pub iterations: usize,
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub lipschitz: f64,
    /// Secant slopes at `r_mesh / 4` and `r_mesh`.
    pub tangency: [f64; 2],
    pub cone_ok: bool,
    pub max_plus_part: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PatchMeta {
    pub kind: SplitKind,
    pub domain: String,
    pub d: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub epsilon_measured: f64,
    pub epsilon_local: f64,
    pub delta: f64,
    pub m1: f64,
    pub m2: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta_hat: f64,
    pub r_mesh: f64,
    pub k: Option<f64>,
    pub t_map: Option<f64>,
    pub m0: Option<usize>,
    pub t_stab: f64,
    pub dt: f64,
    pub diagnostics: PatchDiagnostics,
}

/// Solves `F(x) = 0` for `x` in `R^d` by Broyden's method on the inverse
/// Jacobian, starting from `x0` and the approximate inverse `h0`. `eval`
/// returns `F(x)` and a payload; the payload of the final iterate is returned
/// with the residual norm.
fn broyden<T>(
    x0: &[f64],
    h0: &Mat<f64>,
    tol: f64,
    max_evals: usize,
    mut eval: impl FnMut(&[f64]) -> Result<(Vec<f64>, T)>,
) -> Result<(Vec<f64>, T, f64)> {
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut hinv = h0.clone();
    let (mut fx, mut payload) = eval(&x)?;
    let mut res = norm2(&fx);
    let mut evals = 1;
    while res > tol && evals < max_evals {
        let s: Vec<f64> = mat_vec(&hinv, &fx).iter().map(|v| -v).collect();
        let xn: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        let (fn_, pn) = eval(&xn)?;
        evals += 1;
        let y = sub(&fn_, &fx);
        let hy = mat_vec(&hinv, &y);
        let denom: f64 = (0..d).map(|i| s[i] * hy[i]).sum();
        if denom.abs() > f64::MIN_POSITIVE {
            let sh: Vec<f64> = (0..d).map(|j| (0..d).map(|i| s[i] * hinv[(i, j)]).sum()).collect();
            for i in 0..d {
                for j in 0..d {
                    hinv[(i, j)] += (s[i] - hy[i]) * sh[j] / denom;
                }
            }
        }
        x = xn;
        fx = fn_;
        payload = pn;
        res = norm2(&fx);
    }
    Ok((x, payload, res))
}

/// Sampled local invariant manifold.
#[derive(Debug, Clone)]
pub struct ManifoldPatch {
    pub kind: SplitKind,
    pub samples: Vec<PatchSample>,
    pub graph: Option<GraphFunction>,
    pub meta: PatchMeta,
}

impl ManifoldPatch {
    pub fn points(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.full.as_slice()).collect()
    }
}

/// Result of a cone-invariance experiment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConeCheck {
    pub trajectories: usize,
    pub checks: usize,
    pub violations: usize,
}

/// Starts on the cone boundary `lambda |v|_- = |w|_+` for each `lambda`, and
/// counts steps at which membership flips from true to false.
pub fn cone_invariance(problem: &ManifoldProblem, lambdas: &[f64], starts: usize, steps: usize, seed: u64) -> Result<ConeCheck> {
    let mask = problem.mask();
    let d = problem.frame.d();
    if d == 0 {
        return Ok(ConeCheck { trajectories: 0, checks: 0, violations: 0 });
    }
    let minus = crate::dynamics::random_minus_vectors(&problem.proj, starts, seed);
    let plus = crate::dynamics::random_plus_coords(d, starts, seed ^ 0xc0e);
    let flow = problem.semiflow()?;
    let t_end = steps as f64 * problem.dt;
    let radius = problem.nl.delta;
    let mut jobs = Vec::new();
    for &lambda in lambdas {
        for i in 0..starts {
            jobs.push((lambda, i));
        }
    }
    let results: Vec<(usize, usize)> = jobs
        .into_par_iter()
        .map(|(lambda, i)| {
            // sizes spread over the region where the cutoff is active
            let frac = 0.2 + 1.6 * ((i as f64 + 0.5) / starts as f64);
            let v: Vec<f64> = {
                let n = mask.l2_norm(&minus[i]);
                minus[i].iter().map(|x| x * frac * radius / n).collect()
            };
            let vn = problem.norms.minus(&v)?;
            let wn = problem.norms.plus(&plus[i])?;
            let s = lambda * vn / wn * (1.0 + 1e-12);
            let c: Vec<f64> = plus[i].iter().map(|x| x * s).collect();
            let mut u0 = v;
            crate::linalg::axpy(1.0, &problem.frame.combine(&c), &mut u0);
            let mut was = true;
            let mut checks = 0;
            let mut violations = 0;
            let mut failure = None;
            flow.flow_observed(&u0, t_end, |_, u| {
                match problem.in_cone(u, lambda) {
                    Ok(now) => {
                        checks += 1;
                        if was && !now {
                            violations += 1;
                        }
                        was = now;
                        true
                    }
                    Err(e) => {
                        failure = Some(e);
                        false
                    }
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            Ok((checks, violations))
        })
        .collect::<Result<_>>()?;
    Ok(ConeCheck {
        trajectories: results.len(),
        checks: results.iter().map(|r| r.0).sum(),
        violations: results.iter().map(|r| r.1).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Source, SourceKind};
    use crate::geometry::GridSpec;
    use crate::operators::{assemble, CoefficientSpec};
    use crate::spectral::{compute_split, SplitOptions};

    #[test]
    fn cone_params_worked_example() {
        let p = select_cone_params_for(0.5, 1.0, 0.05).unwrap();
        assert_eq!((p.mu, p.nu), (0.5, 2.0));
        assert!((p.gamma + 0.75).abs() < 1e-12);
        let p = select_cone_params_for(0.5, 1.0, 0.0).unwrap();
        assert!((p.gamma + 0.75).abs() < 1e-12);
        assert!(matches!(select_cone_params_for(0.5, 1.0, 0.2), Err(Error::Infeasible(_))));
    }

    #[test]
    fn cone_membership_is_closed() {
        assert!(cone_membership(1.0, 2.0, 1.0));
        assert!(!cone_membership(2.0, 1.0, 1.0));
        assert!(cone_membership(1.5, 3.0, 2.0));
    }

    #[test]
    fn schedule_hits_half() {
        let cone = select_cone_params_for(0.5, 1.0, 0.05).unwrap();
        let s = schedule(0.5, 1.0, &cone, None, 1e-6, 50).unwrap();
        assert!((s.k - 0.5).abs() < 1e-12);
        // K^m0 / (1 - K) * 2/nu <= tol and m0 is minimal
        let bound = |m: usize| s.k.powi(m as i32) / (1.0 - s.k) * (2.0 / cone.nu);
        assert!(bound(s.m0) <= 1e-6 && bound(s.m0 - 1) > 1e-6);
    }

    #[test]
    fn graph_interpolation_is_multilinear() {
        let mut g = GraphFunction::zero(2, 1.0, 2, 1).unwrap();
        for i in 0..g.node_count() {
            let c = g.node_coords(i);
            g.values[i][0] = 2.0 * c[0] - c[1] + 0.5 * c[0] * c[1];
        }
        let v = g.eval(&[0.3, -0.7]).unwrap();
        // bilinear functions are reproduced exactly
        assert!((v[0] - (0.6 + 0.7 - 0.5 * 0.21)).abs() < 1e-14);
        assert!(g.eval(&[1.2, 0.0]).is_none());
        assert_eq!(g.centre_index(), 12);
        assert!(GraphFunction::zero(3, 1.0, 2, 1).is_err());
    }

    fn problem(kind: SplitKind, source: Source) -> ManifoldProblem {
        let g = GridSpec::unit(15).unwrap();
        let op = assemble(&DomainMask::full(g), &CoefficientSpec::laplacian(-35.0).sample(&g)).unwrap();
        let split = compute_split(&op, &SplitOptions::default()).unwrap();
        let nl = CutoffNonlinearity::new(source, 0.05, None).unwrap().measured(op.mask(), 100, 1);
        let settings = ManifoldSettings { r_mesh: 0.05, mesh_half: 8, directions: 4, radii: 2, ..Default::default() };
        ManifoldProblem::prepare(&op, &nl, &split, kind, &settings, None).unwrap()
    }

    #[test]
    fn linear_unstable_manifold_is_flat() {
        let p = problem(SplitKind::Unstable, Source::zero());
        let patch = p.unstable_manifold().unwrap();
        assert!(patch.meta.diagnostics.lipschitz <= 1e-8);
        assert!(patch.samples.iter().all(|s| s.norm <= p.delta_hat));
    }

    #[test]
    fn linear_stable_manifold_is_flat() {
        let p = problem(SplitKind::Stable, Source::zero());
        let patch = p.stable_manifold().unwrap();
        assert!(patch.meta.diagnostics.max_plus_part <= 1e-8);
        assert!(patch.meta.diagnostics.cone_ok);
    }

    #[test]
    fn cubic_unstable_manifold_contracts_and_is_tangent() {
        let p = problem(SplitKind::Unstable, Source::new(SourceKind::Cubic, 5.0));
        let patch = p.unstable_manifold().unwrap();
        let sched = p.schedule().unwrap();
        let diag = &patch.meta.diagnostics;
        assert!(diag.ratios.iter().skip(1).all(|r| *r <= 1.1 * sched.k), "{:?}", diag.ratios);
        assert!(diag.iterations <= sched.m0 + 3);
        assert!(diag.tangency[0] <= 0.6 * diag.tangency[1], "{:?}", diag.tangency);
        assert!(diag.tangency[1] > 0.0);
        let h = patch.graph.as_ref().unwrap();
        assert!(norm2(&h.eval(&[0.0]).unwrap()) == 0.0);
    }

    #[test]
    fn cubic_stable_samples_stay_in_cone() {
        let p = problem(SplitKind::Stable, Source::new(SourceKind::Cubic, 5.0));
        let patch = p.stable_manifold().unwrap();
        assert!(patch.meta.diagnostics.cone_ok);
        assert!(patch.meta.diagnostics.lipschitz <= 1.2 * p.cone.mu);
        assert_eq!(patch.samples[0].norm, 0.0);
    }
}
