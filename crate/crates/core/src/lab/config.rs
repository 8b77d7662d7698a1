//! Experiment configuration: a TOML file with dotted sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::{CutoffNonlinearity, Source, SourceKind};
use crate::geometry::{build_family, DomainFamily, FamilyKind, GridSpec};
use crate::manifolds::ManifoldSettings;
use crate::operators::{CoefficientSpec, EllipticOperator};
use crate::perturbation::ProblemSpec;
use crate::spectral::{SplitKind, SplitOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Interior nodes per side.
    pub m: usize,
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { m: 31, x0: 0.0, y0: 0.0, side: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    /// `laplacian`, `anisotropic`, `affine` or `trigonometric`.
    pub preset: String,
    pub c0: f64,
    pub amplitude: f64,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        CoefficientConfig { preset: "laplacian".into(), c0: -35.0, amplitude: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearityConfig {
    pub preset: SourceKind,
    pub c: f64,
    /// Cutoff radius.
    pub delta: f64,
    /// Optional target bound on the Lipschitz constant of the modified field.
    pub eta: Option<f64>,
    pub lipschitz_samples: usize,
}

impl Default for NonlinearityConfig {
    fn default() -> Self {
        NonlinearityConfig { preset: SourceKind::Cubic, c: 5.0, delta: 0.05, eta: None, lipschitz_samples: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub kind: FamilyKind,
    pub n_max: usize,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig { kind: FamilyKind::Fixed, n_max: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Split used by `sweep`; the `manifold` subcommands name their own.
    pub kind: SplitKind,
    pub tau_rel: f64,
    pub eigen_tol: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { kind: SplitKind::Unstable, tau_rel: 1e-8, eigen_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub alignment_probes: usize,
    pub garding_samples: usize,
    pub sandwich_samples: usize,
    pub cone_starts: usize,
    pub cone_steps: usize,
    pub consistency_samples: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            alignment_probes: 10,
            garding_samples: 200,
            sandwich_samples: 100,
            cone_starts: 20,
            cone_steps: 50,
            consistency_samples: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub out: PathBuf,
    pub grid: GridConfig,
    pub coefficients: CoefficientConfig,
    pub nonlinearity: NonlinearityConfig,
    pub family: FamilyConfig,
    pub split: SplitConfig,
    pub manifold: ManifoldSettings,
    pub sampling: SamplingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            threads: 0,
            out: PathBuf::from("runs"),
            grid: GridConfig::default(),
            coefficients: CoefficientConfig::default(),
            nonlinearity: NonlinearityConfig::default(),
            family: FamilyConfig::default(),
            split: SplitConfig::default(),
            manifold: ManifoldSettings::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> Error {
    Error::Config { field: field.into(), message: message.into() }
}

fn positive(field: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Field-level and cross-field checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        if self.grid.m < 3 {
            return Err(bad("grid.m", format!("must be at least 3, got {}", self.grid.m)));
        }
        positive("grid.side", self.grid.side)?;
        if CoefficientSpec::preset(&self.coefficients.preset, 0.0, 0.0).is_none() {
            return Err(bad(
                "coefficients.preset",
                format!("unknown preset `{}`; expected one of {:?}", self.coefficients.preset, CoefficientSpec::PRESETS),
            ));
        }
        if !self.coefficients.c0.is_finite() || !self.coefficients.amplitude.is_finite() {
            return Err(bad("coefficients", "c0 and amplitude must be finite"));
        }
        if !self.nonlinearity.c.is_finite() {
            return Err(bad("nonlinearity.c", "must be finite"));
        }
        positive("nonlinearity.delta", self.nonlinearity.delta)?;
        if let Some(eta) = self.nonlinearity.eta {
            positive("nonlinearity.eta", eta)?;
        }
        if self.nonlinearity.lipschitz_samples < 2 {
            return Err(bad("nonlinearity.lipschitz_samples", "must be at least 2"));
        }
        if self.family.n_max < 1 {
            return Err(bad("family.n_max", "must be at least 1"));
        }
        positive("split.tau_rel", self.split.tau_rel)?;
        positive("split.eigen_tol", self.split.eigen_tol)?;
        let ms = &self.manifold;
        positive("manifold.r_mesh", ms.r_mesh)?;
        if ms.r_mesh > self.nonlinearity.delta {
            return Err(bad(
                "manifold.r_mesh",
                format!("r_mesh = {} must not exceed nonlinearity.delta = {}", ms.r_mesh, self.nonlinearity.delta),
            ));
        }
        if ms.mesh_half < 1 {
            return Err(bad("manifold.mesh_half", "must be at least 1"));
        }
        if !(ms.tol > 0.0 && ms.tol < 1.0) {
            return Err(bad("manifold.tol", format!("must lie in (0, 1), got {}", ms.tol)));
        }
        if ms.m_max < 1 {
            return Err(bad("manifold.m_max", "must be at least 1"));
        }
        for (field, v) in [("manifold.t_map", ms.t_map), ("manifold.t_stab", ms.t_stab), ("manifold.dt", ms.dt)] {
            if let Some(x) = v {
                positive(field, x)?;
            }
        }
        if ms.directions < 1 || ms.radii < 1 {
            return Err(bad("manifold.directions", "directions and radii must be at least 1"));
        }
        if !(ms.sigma_fraction > 0.0 && ms.sigma_fraction <= 1.0) {
            return Err(bad("manifold.sigma_fraction", format!("must lie in (0, 1], got {}", ms.sigma_fraction)));
        }
        if let (Some(d1), Some(d2)) = (ms.delta1, ms.delta2) {
            positive("manifold.delta1", d1)?;
            positive("manifold.delta2", d2)?;
            if d1 == d2 {
                return Err(bad("manifold.delta1", "delta1 and delta2 must differ"));
            }
        }
        if self.sampling.garding_samples < 1 || self.sampling.sandwich_samples < 1 || self.sampling.consistency_samples < 1 {
            return Err(bad("sampling", "sample counts must be at least 1"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.m, self.grid.x0, self.grid.y0, self.grid.side)
    }

    pub fn family(&self) -> Result<DomainFamily> {
        build_family(self.family.kind, self.family.n_max, self.grid_spec()?)
    }

    pub fn coefficient_spec(&self) -> CoefficientSpec {
        CoefficientSpec::preset(&self.coefficients.preset, self.coefficients.c0, self.coefficients.amplitude)
            .expect("validated preset")
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        let mut split = SplitOptions { tau_rel: self.split.tau_rel, ..SplitOptions::default() };
        split.eigen.tol = self.split.eigen_tol;
        split.eigen.seed = self.seed;
        ProblemSpec {
            coeffs: self.coefficient_spec(),
            source: Source::new(self.nonlinearity.preset, self.nonlinearity.c),
            delta: self.nonlinearity.delta,
            eta: self.nonlinearity.eta,
            lipschitz_samples: self.nonlinearity.lipschitz_samples,
            split,
            settings: ManifoldSettings { seed: self.seed, ..self.manifold.clone() },
        }
    }
}

/// Necessary conditions for cone feasibility that need no eigenvalues.
///
/// The cone search requires `eps < (beta - alpha) / 4`. For the unstable
/// split `beta - alpha = lambda_u / 4 <= lambda_0 / 4` since the real parts
/// of the spectrum of `-A` lie below `lambda_0`; for the stable split
/// `beta - alpha = sigma / 2` with `sigma` at most `sigma_fraction` times the
/// spectral radius bound. The optional `eta` bound is checked as well.
pub fn feasibility_precheck(
    op: &EllipticOperator,
    nl: &CutoffNonlinearity,
    kind: SplitKind,
    sigma_fraction: f64,
) -> Result<()> {
    let eps = nl.epsilon;
    let gap_bound = match kind {
        SplitKind::Unstable => op.lambda0().max(0.0) / 4.0,
        SplitKind::Stable => sigma_fraction * op.spectral_radius_bound() / 2.0,
    };
    if !(eps < gap_bound / 4.0) {
        return Err(bad(
            "nonlinearity.delta",
            format!(
                "measured epsilon = {eps:.4e} violates epsilon < (beta - alpha)/4 <= {:.4e} for the {} split; reduce delta or c",
                gap_bound / 4.0,
                kind.name()
            ),
        ));
    }
    if let Some(eta) = nl.eta {
        if !(eps < eta / 4.0) {
            return Err(bad("nonlinearity.eta", format!("measured epsilon = {eps:.4e} violates epsilon < eta/4 = {:.4e}", eta / 4.0)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dotted_sections_and_errors_name_the_field() {
        let cfg = ExperimentConfig::from_toml("seed = 3\n[grid]\nm = 15\n[nonlinearity]\npreset = \"sine\"\nc = 2.0\n").unwrap();
        assert_eq!((cfg.seed, cfg.grid.m, cfg.nonlinearity.preset), (3, 15, SourceKind::Sine));
        let field = |text: &str| match ExperimentConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("[grid]\nm = 2\n"), "grid.m");
        assert_eq!(field("[manifold]\nr_mesh = 1.0\n"), "manifold.r_mesh");
        assert_eq!(field("[coefficients]\npreset = \"nope\"\n"), "coefficients.preset");
        assert_eq!(field("[manifold]\nsigma_fraction = 1.5\n"), "manifold.sigma_fraction");
        assert!(matches!(ExperimentConfig::from_toml("[grid]\nq = 1\n"), Err(Error::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml("[manifold]\nseed = 1\n"), Err(Error::Parse(_))));
    }
}
