//! The common box, domain masks on its grid, and perturbed domain families.
//!
//! Nodes are numbered row by row: node `(i, j)` sits at
//! `(x0 + (i + 1) h, y0 + (j + 1) h)` and has full-grid index `j * m + i`.
//! Vectors on a mask list the active nodes in that same order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm2};
use crate::{Error, Result};

/// Square box `[x0, x0 + side] x [y0, y0 + side]` with `m` interior nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    m: usize,
    x0: f64,
    y0: f64,
    side: f64,
}

impl GridSpec {
    pub fn new(m: usize, x0: f64, y0: f64, side: f64) -> Result<Self> {
        if m < 3 {
            return Err(Error::InvalidGrid(format!("m = {m} < 3")));
        }
        if !(side > 0.0 && side.is_finite() && x0.is_finite() && y0.is_finite()) {
            return Err(Error::InvalidGrid(format!("box side {side} must be positive and finite")));
        }
        Ok(GridSpec { m, x0, y0, side })
    }

    /// The unit square.
    pub fn unit(m: usize) -> Result<Self> {
        Self::new(m, 0.0, 0.0, 1.0)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        self.side / (self.m + 1) as f64
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.x0, self.y0)
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn node_count(&self) -> usize {
        self.m * self.m
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.m + i
    }

    #[inline]
    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        let h = self.h();
        (self.x0 + (i + 1) as f64 * h, self.y0 + (j + 1) as f64 * h)
    }

    /// Mass-lumped `L^2` inner product `h^2 sum u_i v_i`.
    pub fn l2_dot(&self, u: &[f64], v: &[f64]) -> f64 {
        self.h() * self.h() * dot(u, v)
    }

    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        self.h() * norm2(u)
    }

    /// Samples `f(x, y)` at every grid node.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.node_count());
        for j in 0..self.m {
            for i in 0..self.m {
                let (x, y) = self.coords(i, j);
                out.push(f(x, y));
            }
        }
        out
    }

    fn same_as(&self, other: &GridSpec) -> bool {
        self == other
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m={} box=[{}, {}]x[{}, {}]", self.m, self.x0, self.x0 + self.side, self.y0, self.y0 + self.side)
    }
}

/// A subdomain of the box given by its active grid nodes. Dirichlet
/// conditions are imposed by deleting the inactive nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMask {
    grid: GridSpec,
    active: Vec<bool>,
    label: String,
    nodes: Vec<usize>,
    slot: Vec<Option<usize>>,
}

impl DomainMask {
    pub fn new(grid: GridSpec, active: Vec<bool>, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if active.len() != grid.node_count() {
            return Err(Error::DimensionMismatch { expected: grid.node_count(), got: active.len() });
        }
        let nodes: Vec<usize> = (0..active.len()).filter(|&k| active[k]).collect();
        if nodes.is_empty() {
            return Err(Error::EmptyMask(label));
        }
        let mut slot = vec![None; active.len()];
        for (s, &k) in nodes.iter().enumerate() {
            slot[k] = Some(s);
        }
        Ok(DomainMask { grid, active, label, nodes, slot })
    }

    /// Mask selecting every node `(i, j)` for which `pred(i, j)` holds.
    pub fn from_predicate(grid: GridSpec, label: impl Into<String>, pred: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let m = grid.m();
        let mut active = vec![false; grid.node_count()];
        for j in 0..m {
            for i in 0..m {
                active[grid.index(i, j)] = pred(i, j);
            }
        }
        Self::new(grid, active, label)
    }

    pub fn full(grid: GridSpec) -> Self {
        Self::from_predicate(grid, "box", |_, _| true).expect("full mask is nonempty")
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[self.grid.index(i, j)]
    }

    /// Number of active nodes (degrees of freedom).
    pub fn count(&self) -> usize {
        self.nodes.len()
    }

    /// Full-grid indices of the active nodes, in vector order.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Position of full-grid node `k` in mask vectors, if active.
    pub fn slot(&self, k: usize) -> Option<usize> {
        self.slot[k]
    }

    /// Grid coordinates `(i, j)` of the `s`-th active node.
    pub fn node_ij(&self, s: usize) -> (usize, usize) {
        let k = self.nodes[s];
        (k % self.grid.m(), k / self.grid.m())
    }

    /// Active-node count times `h^2`.
    pub fn measure(&self) -> f64 {
        let h = self.grid.h();
        self.count() as f64 * h * h
    }

    pub fn is_subset_of(&self, other: &DomainMask) -> bool {
        self.grid.same_as(&other.grid) && self.active.iter().zip(&other.active).all(|(a, b)| !a || *b)
    }

    /// Zero extension to the full grid.
    pub fn extend_by_zero(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.count() {
            return Err(Error::DimensionMismatch { expected: self.count(), got: u.len() });
        }
        let mut out = vec![0.0; self.grid.node_count()];
        for (&k, &v) in self.nodes.iter().zip(u) {
            out[k] = v;
        }
        Ok(out)
    }

    /// Values of a full-grid vector at the active nodes.
    pub fn restrict_full(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.grid.node_count() {
            return Err(Error::DimensionMismatch { expected: self.grid.node_count(), got: u.len() });
        }
        Ok(self.nodes.iter().map(|&k| u[k]).collect())
    }

    /// Restriction of a vector living on `source`, read as its zero extension.
    pub fn restrict_from(&self, u: &[f64], source: &DomainMask) -> Result<Vec<f64>> {
        if !self.grid.same_as(&source.grid) {
            return Err(Error::GridMismatch { left: self.grid.to_string(), right: source.grid.to_string() });
        }
        if u.len() != source.count() {
            return Err(Error::DimensionMismatch { expected: source.count(), got: u.len() });
        }
        Ok(self.nodes.iter().map(|&k| source.slot[k].map_or(0.0, |s| u[s])).collect())
    }

    /// Constant one on the active nodes.
    pub fn indicator(&self) -> Vec<f64> {
        vec![1.0; self.count()]
    }

    /// `L^2` norm of a mask vector (equal to the norm of its zero extension).
    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        self.grid.l2_norm(u)
    }

    pub fn l2_dot(&self, u: &[f64], v: &[f64]) -> f64 {
        self.grid.l2_dot(u, v)
    }

    /// Samples `f(x, y)` at the active nodes.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.count())
            .map(|s| {
                let (i, j) = self.node_ij(s);
                let (x, y) = self.grid.coords(i, j);
                f(x, y)
            })
            .collect()
    }

    /// Bitmap text: `m <m>`, `box <x0> <y0> <side>`, `label <label>`, then
    /// one row of `0`/`1` per grid row, top row (largest `y`) first.
    pub fn to_bitmap(&self) -> String {
        let m = self.grid.m();
        let (x0, y0) = self.grid.origin();
        let mut s = format!("m {m}\nbox {x0} {y0} {}\nlabel {}\n", self.grid.side(), self.label);
        for j in (0..m).rev() {
            for i in 0..m {
                s.push(if self.is_active(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_bitmap(text: &str) -> Result<Self> {
        let perr = |msg: &str| Error::Parse(format!("mask bitmap: {msg}"));
        let mut lines = text.lines();
        let m: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("m "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr("expected `m <count>`"))?;
        let bx: Vec<f64> = lines
            .next()
            .and_then(|l| l.strip_prefix("box "))
            .map(|v| v.split_whitespace().filter_map(|t| t.parse().ok()).collect())
            .ok_or_else(|| perr("expected `box <x0> <y0> <side>`"))?;
        if bx.len() != 3 {
            return Err(perr("box needs three numbers"));
        }
        let label = lines
            .next()
            .and_then(|l| l.strip_prefix("label "))
            .ok_or_else(|| perr("expected `label <name>`"))?
            .to_string();
        let grid = GridSpec::new(m, bx[0], bx[1], bx[2])?;
        let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        if rows.len() != m {
            return Err(perr("row count differs from m"));
        }
        let mut active = vec![false; grid.node_count()];
        for (r, row) in rows.iter().enumerate() {
            let j = m - 1 - r;
            if row.len() != m {
                return Err(perr("row length differs from m"));
            }
            for (i, c) in row.chars().enumerate() {
                active[grid.index(i, j)] = match c {
                    '1' => true,
                    '0' => false,
                    _ => return Err(perr("rows may only contain 0 and 1")),
                };
            }
        }
        DomainMask::new(grid, active, label)
    }
}

/// Shape families of perturbed domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Dumbbell,
    Fingers,
    NotchedSquare,
    Fixed,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Dumbbell => "dumbbell",
            FamilyKind::Fingers => "fingers",
            FamilyKind::NotchedSquare => "notched-square",
            FamilyKind::Fixed => "fixed",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dumbbell" => Ok(FamilyKind::Dumbbell),
            "fingers" => Ok(FamilyKind::Fingers),
            "notched-square" | "notched" => Ok(FamilyKind::NotchedSquare),
            "fixed" => Ok(FamilyKind::Fixed),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

/// Geometric parameters of one family member, in grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MemberParams {
    Dumbbell { handle_width: usize },
    Fingers { count: usize, width: usize },
    NotchedSquare { depth: usize },
    Fixed,
}

#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub n: usize,
    pub mask: DomainMask,
    pub params: MemberParams,
    /// The ideal feature size fell below one cell and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct DomainFamily {
    pub kind: FamilyKind,
    pub grid: GridSpec,
    pub members: Vec<FamilyMember>,
    pub limit: DomainMask,
    pub warnings: Vec<String>,
}

impl DomainFamily {
    pub fn member(&self, n: usize) -> Option<&FamilyMember> {
        self.members.iter().find(|m| m.n == n)
    }

    pub fn n_max(&self) -> usize {
        self.members.len()
    }
}

/// Shapes are laid out on a reference lattice of 64 cells per side and
/// scaled to the actual grid.
const REF_CELLS: usize = 64;

/// Node positions `k` (1-based, in `1..=m`) lying in `[a, b)` reference cells.
fn span(m: usize, a: usize, b: usize) -> std::ops::Range<usize> {
    let s = m + 1;
    let lo = (a * s).div_ceil(REF_CELLS).max(1);
    let hi = (b * s).div_ceil(REF_CELLS).min(m + 1);
    lo..hi.max(lo)
}

/// Ideal width `16 / 2^(n-1)` reference cells converted to nodes; returns the
/// width (at least one) and whether it had to be clamped.
fn halving_width(m: usize, base: usize, halvings: usize) -> (usize, bool) {
    let ideal = base as f64 * (m + 1) as f64 / REF_CELLS as f64 / 2f64.powi(halvings as i32);
    let w = ideal.round() as usize;
    if w < 1 {
        (1, true)
    } else {
        (w, false)
    }
}

fn rect(mask: &mut [bool], grid: &GridSpec, xs: std::ops::Range<usize>, ys: std::ops::Range<usize>) {
    for k in ys {
        for l in xs.clone() {
            mask[grid.index(l - 1, k - 1)] = true;
        }
    }
}

/// Builds `n = 1..=n_max` members of the chosen family on `grid`.
///
/// * `dumbbell`: two square lobes joined by a horizontal handle whose width
///   halves with `n` (16, 8, 4, 2 cells on a 64-cell grid); the limit has no
///   handle and the masks are nested decreasing.
/// * `fingers`: a square with `2^n` thin fingers on its top side; total
///   finger width is fixed so `|Omega_n \ Omega|` does not depend on `n`.
/// * `notched-square`: a square with a two-cell notch cut from the top whose
///   depth halves with `n`; the limit is the unnotched square.
/// * `fixed`: every member equals the full box.
pub fn build_family(kind: FamilyKind, n_max: usize, grid: GridSpec) -> Result<DomainFamily> {
    if n_max < 1 {
        return Err(Error::Config { field: "family.n_max".into(), message: "must be at least 1".into() });
    }
    let m = grid.m();
    let mut warnings = Vec::new();
    let mut members = Vec::with_capacity(n_max);
    let empty = || vec![false; grid.node_count()];

    let limit = match kind {
        FamilyKind::Dumbbell => {
            let mut a = empty();
            rect(&mut a, &grid, span(m, 4, 36), span(m, 16, 48));
            rect(&mut a, &grid, span(m, 42, 62), span(m, 22, 42));
            let lobes = a.clone();
            let handle_x = span(m, 36, 42);
            let centre = ((m + 1) as f64 / 2.0).round() as usize;
            for n in 1..=n_max {
                let (w, clamped) = halving_width(m, 16, n - 1);
                let mut act = lobes.clone();
                let lo = centre.saturating_sub(w / 2).max(1);
                rect(&mut act, &grid, handle_x.clone(), lo..(lo + w).min(m + 1));
                if clamped {
                    warnings.push(format!("dumbbell member {n}: handle clamped to one cell"));
                }
                members.push(FamilyMember {
                    n,
                    mask: DomainMask::new(grid, act, format!("dumbbell-{n}"))?,
                    params: MemberParams::Dumbbell { handle_width: w },
                    clamped,
                });
            }
            DomainMask::new(grid, lobes, "dumbbell-limit")?
        }
        FamilyKind::Fingers => {
            let mut a = empty();
            let xs = span(m, 8, 40);
            rect(&mut a, &grid, xs.clone(), span(m, 8, 40));
            let square = a.clone();
            let ys = span(m, 40, 52);
            let side = xs.len();
            for n in 1..=n_max {
                let count = 1usize << n;
                let (w, clamped) = halving_width(m, 16, n);
                if clamped {
                    warnings.push(format!("fingers member {n}: finger width clamped to one cell"));
                }
                if count * w > side {
                    return Err(Error::InvalidGrid(format!(
                        "fingers member {n}: {count} fingers of width {w} do not fit on a side of {side} cells"
                    )));
                }
                let mut act = square.clone();
                for f in 0..count {
                    // finger f is centred in the f-th of `count` equal slots
                    let slot_lo = xs.start + f * side / count;
                    let slot_hi = xs.start + (f + 1) * side / count;
                    let lo = slot_lo + (slot_hi - slot_lo - w) / 2;
                    rect(&mut act, &grid, lo..lo + w, ys.clone());
                }
                members.push(FamilyMember {
                    n,
                    mask: DomainMask::new(grid, act, format!("fingers-{n}"))?,
                    params: MemberParams::Fingers { count, width: w },
                    clamped,
                });
            }
            DomainMask::new(grid, square, "fingers-limit")?
        }
        FamilyKind::NotchedSquare => {
            let mut a = empty();
            let ys = span(m, 8, 56);
            rect(&mut a, &grid, span(m, 8, 56), ys.clone());
            let square = a.clone();
            let notch_x = span(m, 31, 33);
            for n in 1..=n_max {
                let (depth, clamped) = halving_width(m, 16, n - 1);
                if clamped {
                    warnings.push(format!("notched-square member {n}: notch depth clamped to one cell"));
                }
                let mut act = square.clone();
                for k in ys.end.saturating_sub(depth).max(ys.start)..ys.end {
                    for l in notch_x.clone() {
                        act[grid.index(l - 1, k - 1)] = false;
                    }
                }
                members.push(FamilyMember {
                    n,
                    mask: DomainMask::new(grid, act, format!("notched-square-{n}"))?,
                    params: MemberParams::NotchedSquare { depth },
                    clamped,
                });
            }
            DomainMask::new(grid, square, "notched-square-limit")?
        }
        FamilyKind::Fixed => {
            let full = DomainMask::full(grid);
            for n in 1..=n_max {
                members.push(FamilyMember {
                    n,
                    mask: full.clone().with_label(format!("fixed-{n}")),
                    params: MemberParams::Fixed,
                    clamped: false,
                });
            }
            full.with_label("fixed-limit")
        }
    };

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DomainFamily { kind, grid, members, limit, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(m: usize) -> GridSpec {
        GridSpec::unit(m).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::unit(2).is_err());
        assert!(GridSpec::new(5, 0.0, 0.0, -1.0).is_err());
        assert!((g(63).h() - 1.0 / 64.0).abs() < 1e-16);
    }

    #[test]
    fn full_box_measure() {
        let mask = DomainMask::full(g(31));
        assert!((mask.measure() - (31.0f64 / 32.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn extension_of_zero_and_identity_layout() {
        let mask = DomainMask::full(g(7));
        let u: Vec<f64> = (0..49).map(|k| k as f64).collect();
        assert_eq!(mask.extend_by_zero(&u).unwrap(), u);
        let fam = build_family(FamilyKind::Dumbbell, 2, g(31)).unwrap();
        let z = fam.limit.extend_by_zero(&vec![0.0; fam.limit.count()]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mask = DomainMask::full(g(5));
        assert!(matches!(mask.extend_by_zero(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn fixed_family_repeats_the_limit() {
        let fam = build_family(FamilyKind::Fixed, 3, g(31)).unwrap();
        assert_eq!(fam.members.len(), 3);
        for m in &fam.members {
            assert_eq!(m.mask.active(), fam.limit.active());
        }
    }

    #[test]
    fn dumbbell_handle_widths_and_nesting() {
        let fam = build_family(FamilyKind::Dumbbell, 4, g(63)).unwrap();
        let widths: Vec<usize> = fam
            .members
            .iter()
            .map(|m| match m.params {
                MemberParams::Dumbbell { handle_width } => handle_width,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(widths, vec![16, 8, 4, 2]);
        // cell-counting oracle: lobes 32x32 + 20x20, handle 6 columns wide
        for (m, w) in fam.members.iter().zip(&widths) {
            assert_eq!(m.mask.count(), 32 * 32 + 20 * 20 + 6 * w);
        }
        assert_eq!(fam.limit.count(), 32 * 32 + 20 * 20);
        for pair in fam.members.windows(2) {
            assert!(pair[1].mask.is_subset_of(&pair[0].mask));
            assert!(pair[1].mask.measure() < pair[0].mask.measure());
        }
        assert!(fam.limit.is_subset_of(&fam.members[3].mask));
        assert!(fam.warnings.is_empty());
    }

    #[test]
    fn dumbbell_clamps_on_coarse_grid() {
        let fam = build_family(FamilyKind::Dumbbell, 6, g(31)).unwrap();
        assert!(fam.members[5].clamped);
        assert!(!fam.warnings.is_empty());
        assert!(fam.members.windows(2).all(|p| p[1].mask.is_subset_of(&p[0].mask)));
    }

    #[test]
    fn fingers_keep_the_added_measure() {
        let fam = build_family(FamilyKind::Fingers, 3, g(63)).unwrap();
        let h2 = g(63).h().powi(2);
        for (m, (count, width)) in fam.members.iter().zip([(2, 8), (4, 4), (8, 2)]) {
            assert_eq!(m.params, MemberParams::Fingers { count, width });
            assert!(fam.limit.is_subset_of(&m.mask));
            // 16 finger columns, 12 rows each
            assert_eq!(m.mask.count() - fam.limit.count(), 16 * 12);
            let gap = m.mask.measure() - fam.limit.measure();
            assert!((gap - 192.0 * h2).abs() < 1e-15);
        }
    }

    #[test]
    fn indicator_gap_is_the_added_measure() {
        let fam = build_family(FamilyKind::Fingers, 2, g(63)).unwrap();
        let grid = fam.grid;
        for m in &fam.members {
            let a = m.mask.extend_by_zero(&m.mask.indicator()).unwrap();
            let b = fam.limit.extend_by_zero(&fam.limit.indicator()).unwrap();
            let d = crate::linalg::sub(&a, &b);
            let sq = grid.l2_norm(&d).powi(2);
            assert!((sq - (m.mask.measure() - fam.limit.measure())).abs() < 1e-14);
            let r = fam.limit.restrict_from(&m.mask.indicator(), &m.mask).unwrap();
            assert!(r.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn notched_square_members_grow() {
        let fam = build_family(FamilyKind::NotchedSquare, 4, g(63)).unwrap();
        for pair in fam.members.windows(2) {
            assert!(pair[0].mask.is_subset_of(&pair[1].mask));
        }
        assert_eq!(fam.limit.count() - fam.members[0].mask.count(), 2 * 16);
    }

    #[test]
    fn unknown_family_kind() {
        assert!(matches!("spiral".parse::<FamilyKind>(), Err(Error::UnknownFamily(_))));
    }

    #[test]
    fn bitmap_round_trip() {
        let fam = build_family(FamilyKind::Dumbbell, 1, g(15)).unwrap();
        let text = fam.members[0].mask.to_bitmap();
        let back = DomainMask::from_bitmap(&text).unwrap();
        assert_eq!(&back, &fam.members[0].mask);
    }

    proptest! {
        #[test]
        fn extension_round_trip_and_isometry(seed in 0u64..1000, n in 1usize..5) {
            let fam = build_family(FamilyKind::Fingers, 4, g(31)).unwrap();
            let mask = &fam.members[n - 1].mask;
            let u: Vec<f64> = (0..mask.count())
                .map(|k| (((k as u64 * 2654435761 + seed) % 1000) as f64 - 500.0) / 250.0)
                .collect();
            let e = mask.extend_by_zero(&u).unwrap();
            prop_assert_eq!(mask.restrict_full(&e).unwrap(), u.clone());
            prop_assert_eq!(mask.restrict_from(&u, mask).unwrap(), u.clone());
            let a = mask.l2_norm(&u);
            let b = mask.grid().l2_norm(&e);
            prop_assert!((a - b).abs() <= 1e-14 * a.max(1.0));
        }
    }
}
