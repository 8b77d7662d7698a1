//! The invariant suite behind `mperturb validate`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dynamics::{
    modified_f, random_smooth_field, sandwich_check, CutoffNonlinearity, Semiflow, Source,
};
use crate::lab::config::ExperimentConfig;
use crate::linalg::sub;
use crate::manifolds::{cone_invariance, select_cone_params, ManifoldProblem};
use crate::operators::garding_check;
use crate::perturbation::{upper_semidistance, ProblemSpec};
use crate::spectral::{build_projector, compute_split, SplitKind};
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// `<=`, `>=` or `==`.
    pub relation: &'static str,
    pub pass: bool,
}

impl Check {
    fn le(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, relation: "<=", pass: value <= bound }
    }

    fn eq(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, relation: "==", pass: value == bound }
    }
}

/// Runs every check on the limit domain of the configured family.
pub fn suite(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let spec = cfg.problem_spec();
    let family = cfg.family()?;
    let mask = &family.limit;
    let op = spec.operator(mask)?;
    let nl = spec.nonlinearity(mask)?;
    let mut out = Vec::new();

    let g = garding_check(&op, cfg.sampling.garding_samples, cfg.seed ^ 0x6a)?;
    out.push(Check::eq("garding_violations", g.violations as f64, 0.0));

    // the modified field equals the original one on the ball of radius delta
    let raw = CutoffNonlinearity { delta: f64::INFINITY, ..nl.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let u = random_smooth_field(mask, &mut rng, 6);
        let s = nl.delta * (k as f64 + 0.5) / 20.0 / mask.l2_norm(&u);
        let u: Vec<f64> = u.iter().map(|x| x * s).collect();
        let d = sub(&modified_f(&u, &nl, mask), &modified_f(&u, &raw, mask));
        worst = worst.max(d.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }
    out.push(Check::eq("cutoff_agreement_inside_delta", worst, 0.0));

    let split = compute_split(&op, &spec.split)?;
    out.push(Check::eq("hyperbolic", f64::from(u8::from(split.hyperbolic)), 1.0));
    let res = split
        .sigma_u
        .iter()
        .chain(&split.sigma_c)
        .chain(&split.sigma_s)
        .map(|p| p.residual.max(p.left_residual))
        .fold(0.0, f64::max);
    out.push(Check::le("eigen_residual", res, spec.split.eigen.tol));

    out.extend(semiflow_consistency(cfg, &spec, &op, &nl)?);

    for kind in [SplitKind::Unstable, SplitKind::Stable] {
        let k = kind.name();
        let proj = build_projector(&split, kind, &op)?;
        let (idem, comm) = proj.residuals(&op, 50, cfg.seed ^ 0x50);
        out.push(Check::le(format!("{k}_projector_idempotency"), idem, 1e-8));
        out.push(Check::le(format!("{k}_projector_commutation"), comm, 1e-8 * op.spectral_radius_bound()));
        if proj.d() == 0 && kind == SplitKind::Unstable {
            continue;
        }
        let problem = ManifoldProblem::prepare(&op, &nl, &split, kind, &spec.settings, None)?;
        let sw = sandwich_check(&problem.norms, &problem.dichotomy, cfg.sampling.sandwich_samples, cfg.seed ^ 0x5a)?;
        out.push(Check::eq(format!("{k}_sandwich_violations"), (sw.minus_violations + sw.plus_violations) as f64, 0.0));
        let cone = select_cone_params(&problem.dichotomy, nl.epsilon)?;
        out.push(Check::eq(format!("{k}_cone_feasible"), f64::from(u8::from(cone.feasible)), 1.0));
        out.extend(manifold_checks(&problem)?);
        out.extend(linear_checks(&spec, &op, &split, kind)?);
        if problem.frame.d() > 0 {
            let lambdas = [problem.cone.mu, 1.0, problem.cone.nu];
            let cc = cone_invariance(&problem, &lambdas, cfg.sampling.cone_starts, cfg.sampling.cone_steps, cfg.seed ^ 0xc0)?;
            out.push(Check::eq(format!("{k}_cone_invariance_violations"), cc.violations as f64, 0.0));
        }
    }
    Ok(out)
}

/// `|Phi_0.2(u0) - Phi_0.1(Phi_0.1(u0))|` against ten times the scheme error
/// estimated by step halving.
fn semiflow_consistency(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
    op: &crate::operators::EllipticOperator,
    nl: &CutoffNonlinearity,
) -> Result<Vec<Check>> {
    let split = compute_split(op, &spec.split)?;
    let dt = spec.settings.dt.unwrap_or_else(|| crate::dynamics::SemiflowConfig::default_dt(&split));
    let flow = Semiflow::new(op, nl, spec.settings.scheme, dt)?;
    let fine = Semiflow::new(op, nl, spec.settings.scheme, 0.5 * dt)?;
    let mask = op.mask();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e);
    let mut worst_ratio: f64 = 0.0;
    for k in 0..cfg.sampling.consistency_samples {
        let u = random_smooth_field(mask, &mut rng, 6);
        let s = 2.0 * nl.delta * (k as f64 + 0.5) / cfg.sampling.consistency_samples as f64 / mask.l2_norm(&u);
        let u0: Vec<f64> = u.iter().map(|x| x * s).collect();
        let whole = flow.flow(&u0, 0.2)?;
        let split_flow = flow.flow(&flow.flow(&u0, 0.1)?, 0.1)?;
        let err = mask.l2_norm(&sub(&whole, &fine.flow(&u0, 0.2)?)).max(1e-14 * mask.l2_norm(&u0));
        worst_ratio = worst_ratio.max(mask.l2_norm(&sub(&whole, &split_flow)) / err);
    }
    Ok(vec![Check::le("semiflow_consistency_over_scheme_error", worst_ratio, 10.0)])
}

fn manifold_checks(p: &ManifoldProblem) -> Result<Vec<Check>> {
    let k = p.kind.name();
    let mut out = Vec::new();
    match p.kind {
        SplitKind::Unstable => {
            let patch = p.unstable_manifold()?;
            let sched = p.schedule()?;
            let diag = &patch.meta.diagnostics;
            let worst = diag.ratios.iter().fold(0.0f64, |m, r| m.max(*r));
            out.push(Check::le(format!("{k}_contraction_ratio"), worst, 1.1 * sched.k));
            out.push(Check::le(format!("{k}_iterations"), diag.iterations as f64, (sched.m0 + 3) as f64));
            out.push(Check::le(format!("{k}_lipschitz"), diag.lipschitz, 1.0 / p.cone.nu));
            let tang = if diag.tangency[1] > 0.0 { diag.tangency[0] / diag.tangency[1] } else { 0.0 };
            out.push(Check::le(format!("{k}_tangency_ratio"), tang, 0.6));
            let h0 = patch.graph.as_ref().and_then(|g| g.eval(&vec![0.0; g.d()])).map(|v| crate::linalg::norm2(&v));
            out.push(Check::eq(format!("{k}_graph_at_zero"), h0.unwrap_or(f64::NAN), 0.0));
            out.push(self_distance(&patch, p)?);
        }
        SplitKind::Stable => {
            let patch = p.stable_manifold()?;
            let diag = &patch.meta.diagnostics;
            out.push(Check::eq(format!("{k}_samples_in_cone"), f64::from(u8::from(diag.cone_ok)), 1.0));
            out.push(Check::le(format!("{k}_lipschitz"), diag.lipschitz, 1.2 * p.cone.mu));
            let far = patch.samples.iter().map(|s| s.norm).fold(0.0, f64::max);
            out.push(Check::le(format!("{k}_sample_radius"), far, p.delta_hat));
            out.push(self_distance(&patch, p)?);
        }
    }
    Ok(out)
}

fn self_distance(patch: &crate::manifolds::ManifoldPatch, p: &ManifoldProblem) -> Result<Check> {
    let pts = patch.points();
    let d = upper_semidistance(&pts, &pts, p.mask().grid())?;
    Ok(Check::eq(format!("{}_self_semidistance", p.kind.name()), d, 0.0))
}

/// With `g = 0` both manifolds are the linear subspaces.
fn linear_checks(
    spec: &ProblemSpec,
    op: &crate::operators::EllipticOperator,
    split: &crate::spectral::SpectralSplit,
    kind: SplitKind,
) -> Result<Vec<Check>> {
    let nl = CutoffNonlinearity::new(Source::zero(), spec.delta, None)?.measured(op.mask(), 10, 1);
    let p = ManifoldProblem::prepare(op, &nl, split, kind, &spec.settings, None)?;
    let k = kind.name();
    Ok(match kind {
        SplitKind::Unstable => {
            let patch = p.unstable_manifold()?;
            vec![Check::le(format!("{k}_linear_lipschitz"), patch.meta.diagnostics.lipschitz, 1e-8)]
        }
        SplitKind::Stable => {
            let patch = p.stable_manifold()?;
            vec![Check::le(format!("{k}_linear_plus_part"), patch.meta.diagnostics.max_plus_part, 1e-8)]
        }
    })
}
