//! Subcommand orchestration: build the problem, run the stage, write artifacts.

use std::path::PathBuf;

use anyhow::Context;
use serde::Serialize;

use crate::lab::config::{feasibility_precheck, ExperimentConfig};
use crate::lab::store::{fmt_f64, fmt_opt, ResultStore};
use crate::lab::validate;
use crate::manifolds::{ManifoldPatch, ManifoldProblem};
use crate::perturbation::{basis_alignment, sweep};
use crate::spectral::{build_projector, compute_split, SplitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Spectrum,
    Manifold(SplitKind),
    Sweep,
    Validate,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::Spectrum => "spectrum".into(),
            Command::Manifold(k) => format!("manifold {}", k.name()),
            Command::Sweep => "sweep".into(),
            Command::Validate => "validate".into(),
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Names of failed validation checks; empty for other commands.
    pub failures: Vec<String>,
    pub files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: String,
    seed: u64,
    version: &'static str,
    config: &'a ExperimentConfig,
    files: Vec<String>,
    status: &'static str,
}

/// Runs `cmd` on a validated configuration inside a thread pool of
/// `config.threads` workers (0 picks the rayon default).
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> anyhow::Result<RunOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build().context("building the thread pool")?;
    pool.install(|| run_inner(cmd, cfg))
}

fn run_inner(cmd: Command, cfg: &ExperimentConfig) -> anyhow::Result<RunOutcome> {
    let tag = match cmd {
        Command::Spectrum => "spectrum".to_string(),
        Command::Manifold(k) => format!("manifold_{}", k.name()),
        Command::Sweep => format!("{}_{}", cfg.family.kind.name(), cfg.split.kind.name()),
        Command::Validate => "validate".to_string(),
    };
    let mut store = ResultStore::create(&cfg.out, &tag).with_context(|| format!("creating a run directory under {}", cfg.out.display()))?;
    store.write_text("config.toml", &cfg.to_toml())?;
    let failures = match cmd {
        Command::Spectrum => store.timed("spectrum", |s| spectrum(cfg, s)).map(|_| Vec::new()),
        Command::Manifold(kind) => store.timed("manifold", |s| manifold(cfg, kind, s)).map(|_| Vec::new()),
        Command::Sweep => store.timed("sweep", |s| run_sweep(cfg, s)).map(|_| Vec::new()),
        Command::Validate => store.timed("validate", |s| run_validate(cfg, s)),
    }?;
    let mut files = store.files().to_vec();
    files.push("manifest.json".into());
    let manifest = Manifest {
        command: cmd.name(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        files: files.clone(),
        status: if failures.is_empty() { "ok" } else { "validation_failed" },
    };
    store.write_json("manifest.json", &manifest)?;
    store.finish()?;
    Ok(RunOutcome { dir: store.dir().to_path_buf(), failures, files })
}

fn spectrum(cfg: &ExperimentConfig, store: &mut ResultStore) -> anyhow::Result<()> {
    let spec = cfg.problem_spec();
    let family = cfg.family()?;
    let op = spec.operator(&family.limit).context("assembling the operator")?;
    let split = compute_split(&op, &spec.split).context("computing the spectral split")?;
    let rows: Vec<Vec<String>> = split
        .classified()
        .iter()
        .enumerate()
        .map(|(i, (p, class))| {
            vec![
                i.to_string(),
                fmt_f64(p.value.re),
                fmt_f64(p.value.im),
                fmt_f64(p.value.norm()),
                class.name().to_string(),
                fmt_f64(p.residual),
                fmt_f64(p.left_residual),
            ]
        })
        .collect();
    store.write_csv("spectrum.csv", &["index", "re", "im", "magnitude", "class", "residual", "left_residual"], &rows)?;
    store.write_json(
        "spectrum.json",
        &serde_json::json!({
            "domain": family.limit.label(),
            "hyperbolic": split.hyperbolic,
            "tau_c": split.tau_c,
            "gap": split.gap,
            "d": split.d,
            "lambda0": op.lambda0(),
            "lambda_a": op.lambda_a(),
            "alpha0": op.alpha0(),
        }),
    )?;
    let proj = build_projector(&split, cfg.split.kind, &op).context("building the spectral projector")?;
    let (idem, comm) = proj.residuals(&op, 50, cfg.seed ^ 0x50);
    store.write_json(
        "projector.json",
        &serde_json::json!({
            "kind": cfg.split.kind.name(),
            "d": proj.d(),
            "norm_plus": proj.norm_plus(),
            "norm_minus": proj.norm_minus(),
            "idempotency_residual": idem,
            "commutation_residual": comm,
        }),
    )?;
    Ok(())
}

fn prepare_limit(cfg: &ExperimentConfig, kind: SplitKind) -> anyhow::Result<ManifoldProblem> {
    let spec = cfg.problem_spec();
    let family = cfg.family()?;
    let op = spec.operator(&family.limit).context("assembling the operator")?;
    let nl = spec.nonlinearity(&family.limit)?;
    feasibility_precheck(&op, &nl, kind, spec.settings.sigma_fraction)?;
    let split = compute_split(&op, &spec.split).context("computing the spectral split")?;
    Ok(ManifoldProblem::prepare(&op, &nl, &split, kind, &spec.settings, None).context("fitting dichotomy constants")?)
}

fn write_patch(store: &mut ResultStore, prefix: &str, patch: &ManifoldPatch) -> anyhow::Result<()> {
    let width = patch.samples.first().map_or(0, |s| s.coords.len());
    let mut header: Vec<String> = vec!["index".into()];
    header.extend((0..width).map(|i| format!("c{i}")));
    header.push("norm".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = patch
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = vec![i.to_string()];
            r.extend(s.coords.iter().map(|x| fmt_f64(*x)));
            r.push(fmt_f64(s.norm));
            r
        })
        .collect();
    store.write_csv(&format!("{prefix}samples.csv"), &header, &rows)?;
    store.write_vectors(&format!("{prefix}vectors.bin"), &patch.points())?;
    Ok(())
}

fn manifold(cfg: &ExperimentConfig, kind: SplitKind, store: &mut ResultStore) -> anyhow::Result<()> {
    let problem = prepare_limit(cfg, kind)?;
    let patch = match kind {
        SplitKind::Unstable => problem.unstable_manifold().context("graph transform")?,
        SplitKind::Stable => problem.stable_manifold().context("stable shooting")?,
    };
    write_patch(store, "patch_", &patch)?;
    store.write_json("patch_meta.json", &patch.meta)?;
    let diag = &patch.meta.diagnostics;
    let rows: Vec<Vec<String>> = diag
        .distances
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let ratio = if i == 0 { None } else { diag.ratios.get(i - 1).copied() };
            vec![(i + 1).to_string(), fmt_f64(*d), fmt_opt(ratio)]
        })
        .collect();
    store.write_csv("iterations.csv", &["iteration", "distance", "ratio"], &rows)?;
    Ok(())
}

fn run_sweep(cfg: &ExperimentConfig, store: &mut ResultStore) -> anyhow::Result<()> {
    let spec = cfg.problem_spec();
    let family = cfg.family()?;
    let kind = cfg.split.kind;
    {
        let op = spec.operator(&family.limit)?;
        let nl = spec.nonlinearity(&family.limit)?;
        feasibility_precheck(&op, &nl, kind, spec.settings.sigma_fraction)?;
    }
    let outcome = sweep(&family, &spec, kind).context("perturbation sweep")?;
    let rows: Vec<Vec<String>> = outcome
        .report
        .records
        .iter()
        .map(|r| {
            let e = |i: usize| fmt_opt(r.spectral.eig_err.get(i).copied());
            vec![
                r.n.to_string(),
                fmt_opt(r.upper),
                fmt_opt(r.lower),
                fmt_opt(r.spectral.gap),
                e(0),
                e(1),
                e(2),
                fmt_f64(r.spectral.measure_gap),
                r.flags.join(";"),
            ]
        })
        .collect();
    store.write_csv(
        "report.csv",
        &["n", "upper", "lower", "gap_u", "eig_err_1", "eig_err_2", "eig_err_3", "measure_gap", "flags"],
        &rows,
    )?;
    store.write_json("report.json", &outcome.report)?;
    write_patch(store, "limit_", &outcome.limit_patch)?;
    for (n, _, patch) in &outcome.members {
        write_patch(store, &format!("member_{n}_"), patch)?;
    }
    let align = basis_alignment(&outcome, cfg.sampling.alignment_probes, cfg.seed ^ 0xa1).context("basis alignment")?;
    let rows: Vec<Vec<String>> = align.iter().map(|a| vec![a.n.to_string(), a.probe.to_string(), fmt_opt(a.value)]).collect();
    store.write_csv("alignment.csv", &["n", "probe", "value"], &rows)?;
    Ok(())
}

fn run_validate(cfg: &ExperimentConfig, store: &mut ResultStore) -> anyhow::Result<Vec<String>> {
    let spec = cfg.problem_spec();
    let family = cfg.family()?;
    {
        let op = spec.operator(&family.limit)?;
        let nl = spec.nonlinearity(&family.limit)?;
        feasibility_precheck(&op, &nl, cfg.split.kind, spec.settings.sigma_fraction)?;
    }
    let checks = validate::suite(cfg).context("validation suite")?;
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| vec![c.name.clone(), fmt_f64(c.value), fmt_f64(c.bound), c.relation.to_string(), c.pass.to_string()])
        .collect();
    store.write_csv("validate.csv", &["check", "value", "bound", "relation", "pass"], &rows)?;
    store.write_json("validate.json", &checks)?;
    Ok(checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect())
}

/// Process exit code for a failed run: 2 for configuration problems
/// (including an infeasible cone condition), 1 for I/O, 3 for any other
/// numerical failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use crate::Error as E;
    match err.chain().find_map(|e| e.downcast_ref::<crate::Error>()) {
        Some(E::Config { .. } | E::Parse(_) | E::Infeasible(_) | E::InvalidGrid(_) | E::UnknownFamily(_) | E::NotElliptic(_)) => 2,
        Some(E::Io(_)) => 1,
        Some(_) => 3,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 1,
        None => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let wrap = |e: crate::Error| anyhow::Error::from(e).context("stage");
        assert_eq!(exit_code(&wrap(crate::Error::Config { field: "grid.m".into(), message: "x".into() })), 2);
        assert_eq!(exit_code(&wrap(crate::Error::Infeasible("eps".into()))), 2);
        assert_eq!(exit_code(&wrap(crate::Error::NotHyperbolic { count: 1, tau_c: 1e-8 })), 3);
        assert_eq!(exit_code(&wrap(crate::Error::Io(std::io::Error::other("disk")))), 1);
    }
}
