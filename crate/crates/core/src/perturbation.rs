//! Upper and lower semicontinuity of manifold patches across a family of
//! perturbed domains, measured on point clouds zero-extended to the box.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{random_smooth_field, CutoffNonlinearity, Source};
use crate::geometry::{DomainFamily, DomainMask, FamilyKind, GridSpec};
use crate::linalg::sub;
use crate::manifolds::{ManifoldPatch, ManifoldProblem, ManifoldSettings, Reference, UniformParams};
use crate::operators::{assemble, CoefficientSpec, EllipticOperator};
use crate::spectral::{build_projector, compute_split, projector_gap, SpectralSplit, SplitKind, SplitOptions};
use crate::{Error, Result};

fn max_min(from: &[&[f64]], to: &[&[f64]], grid: &GridSpec) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = grid.node_count();
    for p in from.iter().chain(to) {
        if p.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: p.len() });
        }
    }
    Ok(from
        .par_iter()
        .map(|v| to.iter().map(|u| grid.l2_norm(&sub(v, u))).fold(f64::INFINITY, f64::min))
        .reduce(|| 0.0, f64::max))
}

/// `max_{v in samples_n} min_{u in samples} |v - u|_{L^2(D)}`.
pub fn upper_semidistance(samples_n: &[&[f64]], samples: &[&[f64]], grid: &GridSpec) -> Result<f64> {
    max_min(samples_n, samples, grid)
}

/// `max_{u in samples} min_{v in samples_n} |v - u|_{L^2(D)}`.
pub fn lower_semidistance(samples: &[&[f64]], samples_n: &[&[f64]], grid: &GridSpec) -> Result<f64> {
    max_min(samples, samples_n, grid)
}

/// Everything needed to set up the equation on any domain of the box.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub coeffs: CoefficientSpec,
    pub source: Source,
    pub delta: f64,
    pub eta: Option<f64>,
    pub lipschitz_samples: usize,
    pub split: SplitOptions,
    pub settings: ManifoldSettings,
}

impl ProblemSpec {
    pub fn operator(&self, mask: &DomainMask) -> Result<EllipticOperator> {
        assemble(mask, &self.coeffs.sample(mask.grid()))
    }

    pub fn nonlinearity(&self, mask: &DomainMask) -> Result<CutoffNonlinearity> {
        Ok(CutoffNonlinearity::new(self.source, self.delta, self.eta)?.measured(
            mask,
            self.lipschitz_samples,
            self.settings.seed ^ 0x11b,
        ))
    }
}

fn leading_values(split: &SpectralSplit, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = split.values().iter().map(|z| z.re).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.truncate(k);
    v
}

/// Spectral data of one member relative to the limit problem.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralRecord {
    pub n: usize,
    pub hyperbolic: bool,
    pub d: usize,
    /// `|E_n P_n^+ R_n - E P^+ R|` for the `X^+` projector of the split.
    pub gap: Option<f64>,
    /// Errors of the three rightmost real parts.
    pub eig_err: Vec<f64>,
    /// `|Omega_n| - |Omega|`, which equals `|1_{Omega_n} - 1_Omega|^2` for nested domains.
    pub measure_gap: f64,
    pub indicator_gap_sq: f64,
    pub clamped: bool,
}

/// Spectra, projector gaps and measure gaps across the family (no manifolds).
pub fn spectral_sweep(family: &DomainFamily, spec: &ProblemSpec, kind: SplitKind) -> Result<Vec<SpectralRecord>> {
    let op = spec.operator(&family.limit)?;
    let split = compute_split(&op, &spec.split)?;
    if !split.hyperbolic {
        return Err(Error::NotHyperbolic { count: split.sigma_c.len(), tau_c: split.tau_c });
    }
    let proj = build_projector(&split, kind, &op)?;
    let lead = leading_values(&split, 3);
    let ind_limit = family.limit.extend_by_zero(&family.limit.indicator())?;
    family
        .members
        .par_iter()
        .map(|m| {
            let clock = std::time::Instant::now();
            let op_n = spec.operator(&m.mask)?;
            let split_n = compute_split(&op_n, &spec.split)?;
            log::debug!("member {}: split in {:.2?}", m.n, clock.elapsed());
            let lead_n = leading_values(&split_n, 3);
            let eig_err = lead.iter().zip(&lead_n).map(|(a, b)| (a - b).abs()).collect();
            let d = split_n.dim_plus(kind);
            let gap = if split_n.hyperbolic && d == split.dim_plus(kind) {
                Some(projector_gap(&build_projector(&split_n, kind, &op_n)?, &proj)?)
            } else {
                None
            };
            let ind_n = m.mask.extend_by_zero(&m.mask.indicator())?;
            let diff = sub(&ind_n, &ind_limit);
            let g = m.mask.grid();
            Ok(SpectralRecord {
                n: m.n,
                hyperbolic: split_n.hyperbolic,
                d,
                gap,
                eig_err,
                measure_gap: m.mask.measure() - family.limit.measure(),
                indicator_gap_sq: g.l2_dot(&diff, &diff),
                clamped: m.clamped,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MemberRecord {
    pub n: usize,
    pub accepted: bool,
    pub reason: Option<String>,
    pub upper: Option<f64>,
    pub lower: Option<f64>,
    /// Change of the semidistances when both sample sets are halved.
    pub sampling_error: Option<f64>,
    pub samples: usize,
    pub spectral: SpectralRecord,
    pub m1: Option<f64>,
    pub m2: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SemicontinuityReport {
    pub family: FamilyKind,
    pub kind: SplitKind,
    /// The single parameter tuple used for every member.
    pub params: UniformParams,
    pub limit_samples: usize,
    pub records: Vec<MemberRecord>,
    /// `Some(false)` flags "hypothesis unmet" for the stable kind.
    pub measure_hypothesis: Option<bool>,
    /// Rejected members form a prefix `1..=n0`.
    pub rejections_prefix: bool,
    /// Largest `upper(S, S)` over every produced sample set.
    pub self_distance: f64,
}

impl SemicontinuityReport {
    pub fn accepted(&self) -> impl Iterator<Item = &MemberRecord> {
        self.records.iter().filter(|r| r.accepted)
    }
}

/// Report together with the objects it was computed from.
pub struct SweepOutcome {
    pub report: SemicontinuityReport,
    pub limit: ManifoldProblem,
    pub limit_patch: ManifoldPatch,
    /// Accepted members, sorted by `n`.
    pub members: Vec<(usize, ManifoldProblem, ManifoldPatch)>,
}

fn build_patch(problem: &ManifoldProblem) -> Result<ManifoldPatch> {
    match problem.kind {
        SplitKind::Unstable => problem.unstable_manifold(),
        SplitKind::Stable => problem.stable_manifold(),
    }
}

fn halved<'a>(points: &[&'a [f64]]) -> Vec<&'a [f64]> {
    points.iter().step_by(2).copied().collect()
}

/// Non-increasing measure gaps that shrink to at most half the first value.
pub fn measure_converges(gaps: &[f64]) -> bool {
    let first = gaps.first().copied().unwrap_or(0.0);
    let last = gaps.last().copied().unwrap_or(0.0);
    let tol = 1e-12 * first.abs().max(1.0);
    gaps.windows(2).all(|w| w[1] <= w[0] + tol) && (last <= tol || last <= 0.5 * first)
}

/// Builds the limit patch, then every member patch with the limit's
/// parameters, and measures both semidistances against the limit.
pub fn sweep(family: &DomainFamily, spec: &ProblemSpec, kind: SplitKind) -> Result<SweepOutcome> {
    let grid = family.grid;
    let op = spec.operator(&family.limit)?;
    let split = compute_split(&op, &spec.split)?;
    if !split.hyperbolic {
        return Err(Error::NotHyperbolic { count: split.sigma_c.len(), tau_c: split.tau_c });
    }
    let nl = spec.nonlinearity(&family.limit)?;
    let limit = ManifoldProblem::prepare(&op, &nl, &split, kind, &spec.settings, None)?;
    let clock = std::time::Instant::now();
    let limit_patch = build_patch(&limit)?;
    log::debug!("limit patch in {:.2?}", clock.elapsed());
    let reference: Reference = limit.reference()?;
    let spectral = spectral_sweep(family, spec, kind)?;
    let d = split.dim_plus(kind);

    let results: Vec<(MemberRecord, Option<(ManifoldProblem, ManifoldPatch)>)> = family
        .members
        .par_iter()
        .zip(spectral.par_iter())
        .map(|(m, srec)| {
            let reject = |reason: String| {
                Ok((
                    MemberRecord {
                        n: m.n,
                        accepted: false,
                        reason: Some(reason),
                        upper: None,
                        lower: None,
                        sampling_error: None,
                        samples: 0,
                        spectral: srec.clone(),
                        m1: None,
                        m2: None,
                        flags: vec!["rejected".into()],
                    },
                    None,
                ))
            };
            if !srec.hyperbolic {
                return reject("not hyperbolic".into());
            }
            if srec.d != d {
                return reject(format!("X+ dimension {} differs from {d}", srec.d));
            }
            let op_n = spec.operator(&m.mask)?;
            let split_n = compute_split(&op_n, &spec.split)?;
            let nl_n = spec.nonlinearity(&m.mask)?;
            let problem = match ManifoldProblem::prepare(&op_n, &nl_n, &split_n, kind, &spec.settings, Some(&reference)) {
                Ok(p) => p,
                Err(e @ (Error::ConditioningCollapse { .. } | Error::Dichotomy(_) | Error::Infeasible(_))) => {
                    return reject(e.to_string())
                }
                Err(e) => return Err(e),
            };
            let clock = std::time::Instant::now();
            let patch = build_patch(&problem)?;
            log::debug!("member {}: patch in {:.2?}", m.n, clock.elapsed());
            let pts_n = patch.points();
            let pts = limit_patch.points();
            let upper = upper_semidistance(&pts_n, &pts, &grid)?;
            let lower = lower_semidistance(&pts, &pts_n, &grid)?;
            let (hn, h) = (halved(&pts_n), halved(&pts));
            let su = (upper_semidistance(&hn, &h, &grid)? - upper).abs();
            let sl = (lower_semidistance(&h, &hn, &grid)? - lower).abs();
            let mut flags = Vec::new();
            if m.clamped {
                flags.push("clamped".into());
            }
            if !patch.meta.diagnostics.cone_ok && kind == SplitKind::Stable {
                flags.push("cone".into());
            }
            let record = MemberRecord {
                n: m.n,
                accepted: true,
                reason: None,
                upper: Some(upper),
                lower: Some(lower),
                sampling_error: Some(su.max(sl)),
                samples: pts_n.len(),
                spectral: srec.clone(),
                m1: Some(problem.dichotomy.m1),
                m2: Some(problem.dichotomy.m2),
                flags,
            };
            Ok((record, Some((problem, patch))))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(results.len());
    let mut members = Vec::new();
    for (rec, built) in results {
        if let Some((p, patch)) = built {
            members.push((rec.n, p, patch));
        }
        records.push(rec);
    }
    if members.is_empty() {
        return Err(Error::Sweep("all members were rejected".into()));
    }
    let first_accepted = records.iter().position(|r| r.accepted).unwrap_or(records.len());
    let rejections_prefix = records[first_accepted..].iter().all(|r| r.accepted);
    if !rejections_prefix {
        log::warn!("rejected members are interleaved with accepted ones");
    }
    let measure_hypothesis = match kind {
        SplitKind::Stable => {
            let gaps: Vec<f64> = records.iter().map(|r| r.spectral.measure_gap).collect();
            let ok = measure_converges(&gaps);
            if !ok {
                for r in &mut records {
                    r.flags.push("hypothesis-unmet".into());
                }
            }
            Some(ok)
        }
        SplitKind::Unstable => None,
    };
    let mut self_distance = {
        let p = limit_patch.points();
        upper_semidistance(&p, &p, &grid)?
    };
    for (_, _, patch) in &members {
        let p = patch.points();
        self_distance = self_distance.max(upper_semidistance(&p, &p, &grid)?);
    }
    let report = SemicontinuityReport {
        family: family.kind,
        kind,
        params: reference.params,
        limit_samples: limit_patch.samples.len(),
        records,
        measure_hypothesis,
        rejections_prefix,
        self_distance,
    };
    Ok(SweepOutcome { report, limit, limit_patch, members })
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentRow {
    pub n: usize,
    pub probe: usize,
    /// `|E_n h_n(P_n^+ u|_{Omega_n}) - E h(P^+ u|_Omega)|_{L^2(D)}`; `None`
    /// when the member coordinates leave the mesh.
    pub value: Option<f64>,
}

/// Pointwise convergence of the unstable graphs on fixed probes of `L^2(D)`.
/// Probes are smooth fields scaled so that their limit coordinates sit at
/// most at `0.8 R` on the mesh.
pub fn basis_alignment(outcome: &SweepOutcome, probes: usize, seed: u64) -> Result<Vec<AlignmentRow>> {
    let Some(h) = outcome.limit_patch.graph.as_ref() else {
        return Ok(Vec::new());
    };
    let lim = &outcome.limit;
    let grid = *lim.mask().grid();
    let full = DomainMask::full(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields: Vec<Vec<f64>> = (0..probes)
        .map(|_| {
            let u = random_smooth_field(&full, &mut rng, 6);
            let c = lim.frame.coords(&lim.mask().restrict_from(&u, &full).expect("same grid"));
            let cmax = c.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let s = if cmax > 0.0 { 0.8 * h.radius() / cmax } else { 0.0 };
            u.iter().map(|x| x * s).collect()
        })
        .collect();
    let graph_point = |p: &ManifoldProblem, g: &crate::manifolds::GraphFunction, u: &[f64]| -> Result<Option<Vec<f64>>> {
        let c = p.frame.coords(&p.mask().restrict_from(u, &full)?);
        match g.eval(&c) {
            Some(v) => Ok(Some(p.mask().extend_by_zero(&v)?)),
            None => Ok(None),
        }
    };
    let base: Vec<Vec<f64>> = fields
        .iter()
        .map(|u| graph_point(lim, h, u).map(|v| v.expect("limit probes lie on the mesh")))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (n, p, patch) in &outcome.members {
        let g = patch.graph.as_ref().ok_or_else(|| Error::Sweep("member patch has no graph".into()))?;
        for (i, u) in fields.iter().enumerate() {
            let value = graph_point(p, g, u)?.map(|v| grid.l2_norm(&sub(&v, &base[i])));
            rows.push(AlignmentRow { n: *n, probe: i, value });
        }
    }
    Ok(rows)
}
