//! Conical energies on a cube lattice, the stopping-time corona built from
//! them, and the measured-ratio checkers that sit on top.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::directions::{cmp_scaled, DirectionError, DirectionSet};
use crate::geometry::{radial_ok, AngleInterval, Cone, ConeDirections, Direction, GEOM_TOL};
use crate::lattice::{sorted_by_x, CubeLattice};
use crate::sets::{
    cone_mass, pushforward_density, sort_partners, ConeIndex, DiscreteMeasure, LogQuadrature, MeasureError,
    QuadParams,
};

/// Relative slack for sums that hold exactly in real arithmetic.
pub const SUM_RTOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("A must be at least 1, got {0}")]
    A(f64),
    #[error("delta must be finite and nonnegative, got {0}")]
    Delta(f64),
    #[error("gap [{start}, {end}) of J \\ G has no verified density direction")]
    WitnessMissing { start: f64, end: f64 },
    #[error("root {root}: {what}")]
    Assertion { root: usize, what: String },
    #[error("report does not match lattice: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Direction(#[from] DirectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyParams {
    pub a: f64,
    pub quad: QuadParams,
    /// Compute the `E_J` family (quadratic in the sample size).
    pub with_j: bool,
}

impl EnergyParams {
    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.a >= 1.0 && self.a.is_finite()) {
            return Err(EnergyError::A(self.a));
        }
        self.quad.validate()?;
        Ok(())
    }
}

/// Per-cube energies, indexed by cube id. The `E_J` vectors are empty when
/// they were not requested.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub a: f64,
    pub nodes_per_decade: usize,
    /// Partners within this distance of the apex are ignored.
    pub exclude: f64,
    pub e_g: Vec<f64>,
    pub e_j: Vec<f64>,
    pub e_j_int: Vec<f64>,
    pub e_j_ext: Vec<f64>,
    pub e_j_ext_tilde: Vec<f64>,
    /// `∫_E ∫_{r₀}^1 μ(X(x,G,r))/r dr/r dμ(x)`.
    pub global_g: f64,
    pub global_r0: f64,
}

impl EnergyReport {
    pub fn has_j(&self) -> bool {
        !self.e_j.is_empty()
    }

    /// `max |E_J − E_J^int − E_J^ext| / max(E_J, tiny)`.
    pub fn additivity_defect(&self) -> f64 {
        self.e_j
            .iter()
            .zip(self.e_j_int.iter().zip(&self.e_j_ext))
            .map(|(&t, (&i, &e))| (t - i - e).abs() / t.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

#[derive(Default)]
struct PointEnergy {
    g: Vec<f64>,
    j: Vec<[f64; 4]>,
    global: f64,
}

/// Length of the tall side at level index `t`.
pub fn level_tall(lattice: &CubeLattice, t: usize) -> f64 {
    lattice.cubes[lattice.levels[t][0]].tall
}

/// Cone hull of `C·J`, or `None` when the cone is the whole plane.
fn interval_hull(j: &AngleInterval) -> Option<(Direction, f64)> {
    (j.halfwidth < 0.25).then_some((j.center, j.halfwidth))
}

/// `E_G(Q)` for every cube, and the `E_J` family when requested.
pub fn compute_energies(
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    g: &DirectionSet,
    j: &AngleInterval,
    params: &EnergyParams,
) -> Result<EnergyReport, EnergyError> {
    params.validate()?;
    let n_cubes = lattice.cubes.len();
    if lattice.cube_of.first().map_or(0, Vec::len) != mu.len() {
        return Err(EnergyError::Mismatch("sample size differs from lattice".into()));
    }
    let q = params.quad.nodes_per_decade;
    let a = params.a;
    let exclude = mu.spacing();
    let depth = lattice.depth();
    let talls: Vec<f64> = (0..depth).map(|t| level_tall(lattice, t)).collect();
    let rules_g: Vec<LogQuadrature> = talls.iter().map(|&l| LogQuadrature::new(l / a, a.powi(3) * l, q)).collect();
    let rules_j: Vec<LogQuadrature> = talls.iter().map(|&l| LogQuadrature::new(lattice.rho * l, l, q)).collect();
    let global_r0 = if exclude > 0.0 { exclude } else { talls[depth - 1] / a };
    let rule_global = (global_r0 < 1.0).then(|| LogQuadrature::new(global_r0, 1.0, q));
    let r_g_max = (a.powi(3) * talls[0]).max(1.0);
    let r_j_max = talls[0];
    let g_hull = g.line_hull();
    let j3 = j.dilate(3.0);
    let jh = j.dilate(0.5);
    let j3_hull = interval_hull(&j3);

    let index = ConeIndex::new(mu);
    let pts = mu.points();
    let w = mu.weights();
    let per_point: Vec<PointEnergy> = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let x = pts[i];
            let mut out = PointEnergy::default();
            let mut gp = Vec::new();
            if !g.is_empty() {
                index.for_each_candidate(x, g_hull, r_g_max, |k| {
                    let v = pts[k] - x;
                    let d = v.norm();
                    if d > exclude && d <= r_g_max + GEOM_TOL && g.contains_line(v) {
                        gp.push((d, w[k]));
                    }
                });
                sort_partners(&mut gp);
            }
            out.g = rules_g.iter().map(|r| r.integrate_cone(&gp)).collect();
            out.global = rule_global.as_ref().map_or(0.0, |r| r.integrate_cone(&gp));
            if params.with_j {
                let (mut all, mut int, mut ext) = (Vec::new(), Vec::new(), Vec::new());
                index.for_each_candidate(x, j3_hull, r_j_max, |k| {
                    let v = pts[k] - x;
                    let d = v.norm();
                    if d > exclude && d <= r_j_max + GEOM_TOL && j3.contains_line(v) {
                        all.push((d, w[k]));
                        if jh.contains_line(v) {
                            int.push((d, w[k]));
                        } else {
                            ext.push((d, w[k]));
                        }
                    }
                });
                sort_partners(&mut all);
                sort_partners(&mut int);
                sort_partners(&mut ext);
                out.j = (0..depth)
                    .map(|t| {
                        let r = &rules_j[t];
                        let l = talls[t];
                        let tilde: f64 =
                            ext.iter().filter(|p| radial_ok(p.0, lattice.rho * l, l)).map(|p| p.1).sum::<f64>() / l;
                        [r.integrate_cone(&all), r.integrate_cone(&int), r.integrate_cone(&ext), tilde]
                    })
                    .collect();
            }
            out
        })
        .collect();

    let by_x = sorted_by_x(mu);
    let e_g: Vec<f64> = (0..n_cubes)
        .into_par_iter()
        .map(|c| {
            let cube = &lattice.cubes[c];
            let t = lattice.level_index(c);
            let rect = lattice.cube_rect(c).scaled(2.0 * a);
            let half = rect.short / 2.0 + GEOM_TOL;
            let start = by_x.partition_point(|&i| pts[i].x < cube.center.x - half);
            let mut acc = 0.0;
            for &i in &by_x[start..] {
                if pts[i].x > cube.center.x + half {
                    break;
                }
                if rect.contains(pts[i]) {
                    acc += w[i] * per_point[i].g[t];
                }
            }
            acc / cube.mass
        })
        .collect();

    let global_g: f64 = per_point.iter().zip(w).map(|(p, &wi)| wi * p.global).sum();
    let mut fam = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    if params.with_j {
        for f in fam.iter_mut() {
            *f = vec![0.0; n_cubes];
        }
        for t in 0..depth {
            for (i, p) in per_point.iter().enumerate() {
                let c = lattice.cube_of[t][i];
                for (f, v) in fam.iter_mut().zip(p.j[t]) {
                    f[c] += w[i] * v;
                }
            }
        }
        for f in fam.iter_mut() {
            for (v, cube) in f.iter_mut().zip(&lattice.cubes) {
                *v /= cube.mass;
            }
        }
    }
    let [e_j, e_j_int, e_j_ext, e_j_ext_tilde] = fam;
    Ok(EnergyReport {
        a,
        nodes_per_decade: q,
        exclude,
        e_g,
        e_j,
        e_j_int,
        e_j_ext,
        e_j_ext_tilde,
        global_g,
        global_r0,
    })
}

/// Write-once memo of energy reports for one sample and lattice, keyed by
/// direction set, interval and parameters.
#[derive(Default)]
pub struct EnergyCache {
    map: Mutex<HashMap<String, Arc<EnergyReport>>>,
}

impl EnergyCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_compute(
        &self,
        lattice: &CubeLattice,
        mu: &DiscreteMeasure,
        g: &DirectionSet,
        j: &AngleInterval,
        params: &EnergyParams,
    ) -> Result<Arc<EnergyReport>, EnergyError> {
        let key = format!(
            "{}|{:x}|{:x}|{:x}|{}|{}",
            g.to_text(),
            j.center.turns().to_bits(),
            j.halfwidth.to_bits(),
            params.a.to_bits(),
            params.quad.nodes_per_decade,
            params.with_j
        );
        if let Some(r) = self.map.lock().ok().and_then(|m| m.get(&key).cloned()) {
            return Ok(r);
        }
        let report = Arc::new(compute_energies(lattice, mu, g, j, params)?);
        let mut m = self.map.lock().map_err(|_| EnergyError::Mismatch("poisoned cache".into()))?;
        Ok(m.entry(key).or_insert(report).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tree {
    pub root: usize,
    /// `k` with `root ∈ Top_k`.
    pub layer: usize,
    /// Cubes of `Tree(R)`, preorder.
    pub cubes: Vec<usize>,
    pub bce: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoronaDecomposition {
    pub delta: f64,
    pub a: f64,
    /// `ℋ(J)`.
    pub h_j: f64,
    /// `δ·ℋ(J)`.
    pub threshold: f64,
    pub trees: Vec<Tree>,
    /// Tree index of every cube.
    pub tree_of: Vec<usize>,
    pub is_bce: Vec<bool>,
}

impl CoronaDecomposition {
    /// `𝒯(R) = Tree(R) \ BCE(R)`.
    pub fn inner(&self, tree: usize) -> impl Iterator<Item = usize> + '_ {
        self.trees[tree].cubes.iter().copied().filter(|&c| !self.is_bce[c])
    }

    /// Histogram `size → count` of tree sizes.
    pub fn size_histogram(&self) -> Vec<(usize, usize)> {
        let mut h: HashMap<usize, usize> = HashMap::new();
        for t in &self.trees {
            *h.entry(t.cubes.len()).or_default() += 1;
        }
        let mut v: Vec<_> = h.into_iter().collect();
        v.sort_unstable();
        v
    }

    pub fn n_layers(&self) -> usize {
        self.trees.iter().map(|t| t.layer + 1).max().unwrap_or(0)
    }
}

/// Stopping-time corona: roots start at the top level; in each tree the
/// maximal cubes whose ancestor sum of `E_G` reaches `δℋ(J)` are `BCE`, and
/// their children root the next layer.
pub fn build_corona(
    lattice: &CubeLattice,
    e_g: &[f64],
    h_j: f64,
    delta: f64,
    a: f64,
) -> Result<CoronaDecomposition, EnergyError> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(EnergyError::Delta(delta));
    }
    if e_g.len() != lattice.cubes.len() {
        return Err(EnergyError::Mismatch(format!("{} energies for {} cubes", e_g.len(), lattice.cubes.len())));
    }
    let threshold = delta * h_j;
    let n = lattice.cubes.len();
    let mut tree_of = vec![usize::MAX; n];
    let mut is_bce = vec![false; n];
    let mut trees = Vec::new();
    let mut roots: Vec<usize> = lattice.levels[0].clone();
    let mut layer = 0;
    while !roots.is_empty() {
        let mut next = Vec::new();
        for &root in &roots {
            let id = trees.len();
            let mut tree = Tree { root, layer, cubes: Vec::new(), bce: Vec::new() };
            let mut stack = vec![(root, 0.0f64)];
            while let Some((c, parent_sum)) = stack.pop() {
                let s = parent_sum + e_g[c];
                tree.cubes.push(c);
                tree_of[c] = id;
                let children = &lattice.cubes[c].children;
                if s >= threshold {
                    is_bce[c] = true;
                    tree.bce.push(c);
                    next.extend(children.iter().copied());
                } else {
                    stack.extend(children.iter().rev().map(|&ch| (ch, s)));
                }
            }
            trees.push(tree);
        }
        roots = next;
        layer += 1;
    }
    Ok(CoronaDecomposition { delta, a, h_j, threshold, trees, tree_of, is_bce })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeBoundsRow {
    pub root: usize,
    pub layer: usize,
    pub size: usize,
    pub n_bce: usize,
    /// `Σ_{Q∈Tree\BCE} E_G(Q)μ(Q)`.
    pub lhs_small: f64,
    /// `δℋ(J)μ(R)`.
    pub rhs_small: f64,
    /// `δℋ(J)·Σ_{P∈BCE} μ(P)`.
    pub lhs_lower: f64,
    /// `Σ_{Q∈Tree} E_G(Q)μ(Q)`.
    pub tree_energy: f64,
    /// `tree_energy / (ℋ(J)μ(R))`.
    pub upper_ratio: f64,
}

/// Trees partition the lattice: every cube lies in exactly one tree, each
/// tree is closed under parents up to its root, and every root is a top cube
/// or a child of a stopping cube.
pub fn check_partition(corona: &CoronaDecomposition, lattice: &CubeLattice) -> Result<(), EnergyError> {
    let n = lattice.cubes.len();
    let mut seen = vec![usize::MAX; n];
    for (t, tree) in corona.trees.iter().enumerate() {
        for &c in &tree.cubes {
            if c >= n || seen[c] != usize::MAX {
                return Err(EnergyError::Assertion { root: tree.root, what: format!("cube {c} listed twice") });
            }
            seen[c] = t;
        }
    }
    if let Some(c) = seen.iter().position(|&t| t == usize::MAX) {
        return Err(EnergyError::Assertion { root: usize::MAX, what: format!("cube {c} in no tree") });
    }
    for (t, tree) in corona.trees.iter().enumerate() {
        let root_ok = match lattice.cubes[tree.root].parent {
            None => true,
            Some(p) => corona.is_bce[p] && seen[p] != t,
        };
        if !root_ok {
            return Err(EnergyError::Assertion { root: tree.root, what: "root is not below a stopping cube".into() });
        }
        for &c in &tree.cubes {
            if c == tree.root {
                continue;
            }
            let p = lattice.cubes[c].parent.expect("non-root cube has a parent");
            if seen[p] != t || corona.is_bce[p] {
                return Err(EnergyError::Assertion { root: tree.root, what: format!("cube {c} detached from its tree") });
            }
        }
    }
    Ok(())
}

fn le_rel(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + SUM_RTOL * (lhs.abs() + rhs.abs()) + f64::MIN_POSITIVE
}

/// Both stopping-sum inequalities per root. Rows are always returned; the
/// error names the first violating root.
pub fn check_tree_bounds(
    corona: &CoronaDecomposition,
    lattice: &CubeLattice,
    e_g: &[f64],
) -> (Vec<TreeBoundsRow>, Result<(), EnergyError>) {
    let rows: Vec<TreeBoundsRow> = corona
        .trees
        .iter()
        .map(|t| {
            let mass = |c: usize| lattice.cubes[c].mass;
            let mu_r = mass(t.root);
            let lhs_small: f64 = t.cubes.iter().filter(|&&c| !corona.is_bce[c]).map(|&c| e_g[c] * mass(c)).sum();
            let tree_energy: f64 = t.cubes.iter().map(|&c| e_g[c] * mass(c)).sum();
            let bce_mass: f64 = t.bce.iter().map(|&c| mass(c)).sum();
            TreeBoundsRow {
                root: t.root,
                layer: t.layer,
                size: t.cubes.len(),
                n_bce: t.bce.len(),
                lhs_small,
                rhs_small: corona.threshold * mu_r,
                lhs_lower: corona.threshold * bce_mass,
                tree_energy,
                upper_ratio: if corona.h_j > 0.0 { tree_energy / (corona.h_j * mu_r) } else { 0.0 },
            }
        })
        .collect();
    let verdict = rows.iter().try_for_each(|r| {
        if !le_rel(r.lhs_small, r.rhs_small) {
            return Err(EnergyError::Assertion {
                root: r.root,
                what: format!("inner energy {} exceeds δℋ(J)μ(R) = {}", r.lhs_small, r.rhs_small),
            });
        }
        if !le_rel(r.lhs_lower, r.tree_energy) {
            return Err(EnergyError::Assertion {
                root: r.root,
                what: format!("δℋ(J)μ(BCE) = {} exceeds tree energy {}", r.lhs_lower, r.tree_energy),
            });
        }
        Ok(())
    });
    (rows, verdict)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackingReport {
    pub n_top: usize,
    pub sum_top: f64,
    pub global_g: f64,
    /// `global_g/(δℋ(J))`, infinite when `δℋ(J) = 0` and the integral is
    /// positive.
    pub energy_term: f64,
    pub mass_term: f64,
    pub bound: f64,
    pub ratio: f64,
}

pub fn check_packing(corona: &CoronaDecomposition, lattice: &CubeLattice, report: &EnergyReport) -> PackingReport {
    let sum_top: f64 = corona.trees.iter().map(|t| lattice.cubes[t.root].mass).sum();
    let mass_term: f64 = lattice.levels[0].iter().map(|&c| lattice.cubes[c].mass).sum();
    let energy_term = if report.global_g == 0.0 {
        0.0
    } else if corona.threshold > 0.0 {
        report.global_g / corona.threshold
    } else {
        f64::INFINITY
    };
    let bound = energy_term + mass_term;
    PackingReport {
        n_top: corona.trees.len(),
        sum_top,
        global_g: report.global_g,
        energy_term,
        mass_term,
        bound,
        ratio: sum_top / bound,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrivialBoundReport {
    pub constant: f64,
    pub bound: f64,
    pub max_energy: f64,
    pub max_ratio: f64,
    pub violations: Vec<usize>,
}

/// `E_G(Q) ≤ 10·A⁴·M·C₀·ℋ(J)` for every cube.
pub fn check_trivial_bound(e_g: &[f64], a: f64, m: f64, c0: f64, h_j: f64) -> TrivialBoundReport {
    let constant = 10.0 * a.powi(4) * m * c0;
    let bound = constant * h_j;
    let max_energy = e_g.iter().copied().fold(0.0, f64::max);
    let violations = e_g.iter().enumerate().filter(|(_, &e)| e > bound).map(|(i, _)| i).collect();
    TrivialBoundReport { constant, bound, max_energy, max_ratio: max_energy / bound, violations }
}

/// `Σ E_J^ext(Q)μ(Q) / Σ Ẽ_J^ext(Q)μ(Q)` over all cubes.
pub fn est4_ratio(lattice: &CubeLattice, report: &EnergyReport) -> Option<f64> {
    if !report.has_j() {
        return None;
    }
    let weighted = |v: &[f64]| -> f64 { v.iter().zip(&lattice.cubes).map(|(e, c)| e * c.mass).sum() };
    let num = weighted(&report.e_j_ext);
    let den = weighted(&report.e_j_ext_tilde);
    Some(if num == 0.0 { 0.0 } else { num / den })
}

/// A maximal run of cells of `J \ G` with its density direction, if any.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapWitness {
    pub start: f64,
    pub end: f64,
    pub theta: Option<Direction>,
    pub sup_norm: f64,
}

/// Runs of consecutive cells of a direction set, as `[start, end)` in turns.
pub fn cell_runs(set: &DirectionSet) -> Vec<(f64, f64)> {
    let width = 1.0 / set.len() as f64;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for c in set.cells() {
        match runs.last_mut() {
            Some(r) if r.1 == c => r.1 = c + 1,
            _ => runs.push((c, c + 1)),
        }
    }
    runs.into_iter().map(|(s, e)| (s as f64 * width, e as f64 * width)).collect()
}

/// For each run `I` of `J \ G`, searches `3I` for `θ` with
/// `‖π^⊥_θ μ‖_∞ ≤ M`.
pub fn find_gap_witnesses(
    mu: &DiscreteMeasure,
    j_minus_g: &DirectionSet,
    m: f64,
    bin_width: f64,
) -> Result<Vec<GapWitness>, EnergyError> {
    let mut out = Vec::new();
    for (start, end) in cell_runs(j_minus_g) {
        let len = end - start;
        let mid = 0.5 * (start + end);
        let mut found = None;
        let mut best = f64::INFINITY;
        for k in [0.0, -0.5, 0.5, -1.0, 1.0, -1.5, 1.5] {
            let theta = Direction::new(mid + k * len);
            let d = pushforward_density(mu, theta.perp(), bin_width)?;
            if d.degenerate {
                continue;
            }
            best = best.min(d.sup_norm);
            if d.sup_norm <= m {
                found = Some(theta);
                best = d.sup_norm;
                break;
            }
        }
        out.push(GapWitness { start, end, theta: found, sup_norm: best });
    }
    Ok(out)
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    (lo.ln() + rng.gen::<f64>() * (hi / lo).ln()).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LittleMeasReport {
    pub trials: usize,
    pub h_j_minus_g: f64,
    pub n_gaps: usize,
    pub max_lhs: f64,
    /// `max μ(X(x,J\G,r)) / (M·ℋ(J\G)·r)`.
    pub max_c: f64,
    pub mean_c: f64,
}

/// Random `(x, r)` samples of `μ(X(x,J\G,r))` against `M·ℋ(J\G)·r`.
pub fn check_littlemeas(
    mu: &DiscreteMeasure,
    j_minus_g: &DirectionSet,
    witnesses: &[GapWitness],
    m: f64,
    trials: usize,
    seed: u64,
) -> Result<LittleMeasReport, EnergyError> {
    if let Some(w) = witnesses.iter().find(|w| w.theta.is_none()) {
        return Err(EnergyError::WitnessMissing { start: w.start, end: w.end });
    }
    let h = j_minus_g.measure();
    let mut report =
        LittleMeasReport { trials, h_j_minus_g: h, n_gaps: witnesses.len(), max_lhs: 0.0, max_c: 0.0, mean_c: 0.0 };
    if mu.is_empty() || trials == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (10.0 * mu.spacing()).max(1e-9);
    let hi = mu.diameter().max(lo);
    let samples: Vec<(usize, f64)> = (0..trials).map(|_| (rng.gen_range(0..mu.len()), log_uniform(&mut rng, lo, hi))).collect();
    let dirs = ConeDirections::Set(j_minus_g.clone());
    let results: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|&(i, r)| {
            let cone = Cone { apex: mu.points()[i], directions: dirs.clone(), r_in: 0.0, r_out: r };
            let lhs = if h == 0.0 { 0.0 } else { cone_mass(mu, &cone, mu.spacing()) };
            let c = if lhs == 0.0 { 0.0 } else { lhs / (m * h * r) };
            (lhs, c)
        })
        .collect();
    report.max_lhs = results.iter().map(|r| r.0).fold(0.0, f64::max);
    report.max_c = results.iter().map(|r| r.1).fold(0.0, f64::max);
    report.mean_c = results.iter().map(|r| r.1).sum::<f64>() / trials as f64;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FillingReport {
    /// `ℋ(J\G) ≤ εℋ(J)` held on the bitsets.
    pub applicable: bool,
    pub samples: usize,
    pub positive: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    /// `(point, r)` where the `0.9J` cone has mass and the `G` cone has none.
    pub falsified: Vec<(usize, f64)>,
}

/// `μ(X(x,0.9J,r)) / μ(X(x,G,2r))` at random points and log-spaced radii.
pub fn check_filling_gaps(
    mu: &DiscreteMeasure,
    j: &AngleInterval,
    g: &DirectionSet,
    eps: f64,
    trials: usize,
    n_radii: usize,
    seed: u64,
) -> Result<FillingReport, EnergyError> {
    let jset = DirectionSet::from_angle_interval(j, g.depth())?;
    let gap = jset.difference(g).count();
    let applicable = cmp_scaled(jset.count(), eps, gap) != std::cmp::Ordering::Less;
    let mut report =
        FillingReport { applicable, samples: 0, positive: 0, max_ratio: 0.0, mean_ratio: 0.0, falsified: Vec::new() };
    if !applicable || mu.is_empty() || trials == 0 || n_radii == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (10.0 * mu.spacing()).max(1e-9);
    let hi = mu.diameter().max(lo);
    let radii: Vec<f64> = (0..n_radii)
        .map(|k| if n_radii == 1 { lo } else { lo * (hi / lo).powf(k as f64 / (n_radii - 1) as f64) })
        .collect();
    let points: Vec<usize> = (0..trials).map(|_| rng.gen_range(0..mu.len())).collect();
    let num_dirs = ConeDirections::Interval(j.dilate(0.9));
    let den_dirs = ConeDirections::Set(g.clone());
    let rows: Vec<(usize, f64, f64, f64)> = points
        .par_iter()
        .flat_map_iter(|&i| {
            let x = mu.points()[i];
            let num_dirs = num_dirs.clone();
            let den_dirs = den_dirs.clone();
            radii.clone().into_iter().map(move |r| {
                let num = cone_mass(mu, &Cone { apex: x, directions: num_dirs.clone(), r_in: 0.0, r_out: r }, mu.spacing());
                let den =
                    cone_mass(mu, &Cone { apex: x, directions: den_dirs.clone(), r_in: 0.0, r_out: 2.0 * r }, mu.spacing());
                (i, r, num, den)
            })
        })
        .collect();
    report.samples = rows.len();
    let mut sum = 0.0;
    for &(i, r, num, den) in &rows {
        if den > 0.0 {
            let ratio = num / den;
            report.positive += 1;
            sum += ratio;
            report.max_ratio = report.max_ratio.max(ratio);
        } else if num > 0.0 {
            report.falsified.push((i, r));
        }
    }
    if report.positive > 0 {
        report.mean_ratio = sum / report.positive as f64;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapRow {
    pub root: usize,
    pub level: i32,
    pub n_cubes: usize,
    pub max_overlap: usize,
    pub at: f64,
    pub applicable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapReport {
    pub c_overlap: usize,
    pub rows: Vec<OverlapRow>,
    pub max_overlap: usize,
    /// First applicable row exceeding `c_overlap`.
    pub violation: Option<OverlapRow>,
}

/// Largest number of closed intervals sharing a point, and one such point.
pub fn max_overlap(intervals: &[(f64, f64)]) -> (usize, f64) {
    let mut ev: Vec<(f64, i32)> = Vec::with_capacity(2 * intervals.len());
    for &(a, b) in intervals {
        ev.push((a - GEOM_TOL, -1));
        ev.push((b + GEOM_TOL, 1));
    }
    ev.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let (mut cur, mut best, mut at) = (0i64, 0i64, f64::NAN);
    for (x, k) in ev {
        cur -= k as i64;
        if cur > best {
            best = cur;
            at = x;
        }
    }
    (best as usize, at)
}

/// Overlap of `π₀(𝒭_P)` over `P ∈ 𝒯_k(R)` for every root and level; trees
/// with `tree_ok = false` are reported as not applicable.
pub fn check_projection_overlap(
    corona: &CoronaDecomposition,
    lattice: &CubeLattice,
    tree_ok: &[bool],
    c_overlap: usize,
) -> OverlapReport {
    let mut rows = Vec::new();
    for (ti, tree) in corona.trees.iter().enumerate() {
        let mut by_level: Vec<(i32, Vec<(f64, f64)>)> = Vec::new();
        for c in corona.inner(ti) {
            let cube = &lattice.cubes[c];
            let iv = (cube.center.x - cube.side / 2.0, cube.center.x + cube.side / 2.0);
            match by_level.iter_mut().find(|(l, _)| *l == cube.level) {
                Some((_, v)) => v.push(iv),
                None => by_level.push((cube.level, vec![iv])),
            }
        }
        by_level.sort_by_key(|(l, _)| *l);
        for (level, ivs) in by_level {
            let (m, at) = max_overlap(&ivs);
            rows.push(OverlapRow {
                root: tree.root,
                level,
                n_cubes: ivs.len(),
                max_overlap: m,
                at,
                applicable: tree_ok.get(ti).copied().unwrap_or(false),
            });
        }
    }
    let max_overlap = rows.iter().filter(|r| r.applicable).map(|r| r.max_overlap).max().unwrap_or(0);
    let violation = rows.iter().find(|r| r.applicable && r.max_overlap > c_overlap).cloned();
    OverlapReport { c_overlap, rows, max_overlap, violation }
}

/// CSV rows: cube id, level, energies, tree id, BCE flag.
pub fn write_energy_csv<W: Write>(
    w: W,
    lattice: &CubeLattice,
    report: &EnergyReport,
    corona: Option<&CoronaDecomposition>,
) -> Result<(), EnergyError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["cube", "level", "mass", "e_g", "e_j", "e_j_int", "e_j_ext", "e_j_ext_tilde", "tree", "is_bce"])
        .map_err(MeasureError::from)?;
    let opt = |v: &[f64], i: usize| v.get(i).map(|x| format!("{x:e}")).unwrap_or_default();
    for c in &lattice.cubes {
        let i = c.id;
        wr.write_record([
            i.to_string(),
            c.level.to_string(),
            format!("{:e}", c.mass),
            format!("{:e}", report.e_g[i]),
            opt(&report.e_j, i),
            opt(&report.e_j_int, i),
            opt(&report.e_j_ext, i),
            opt(&report.e_j_ext_tilde, i),
            corona.map(|k| k.tree_of[i].to_string()).unwrap_or_default(),
            corona.map(|k| k.is_bce[i].to_string()).unwrap_or_default(),
        ])
        .map_err(MeasureError::from)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AnisoRect, Point};
    use crate::lattice::build_lattice;

    fn params(a: f64, with_j: bool) -> EnergyParams {
        EnergyParams { a, quad: QuadParams { nodes_per_decade: 16 }, with_j }
    }

    fn vertical() -> AngleInterval {
        AngleInterval::new(Direction::new(0.25), 1.0 / 16.0).unwrap()
    }

    fn cell_set(lo: f64, hi: f64) -> DirectionSet {
        DirectionSet::from_cells(8, ((lo * 256.0).round() as usize)..((hi * 256.0).round() as usize)).unwrap()
    }

    /// `Σ_j du/r_j·w` over nodes `r_j ≥ d`, nodes rebuilt from the formula.
    fn two_atom_sum(a: f64, b: f64, q: usize, d: f64) -> f64 {
        let n = q.max((q as f64 * (b / a).log10()).ceil() as usize);
        let du = (b / a).ln() / n as f64;
        (0..n).map(|k| a * ((k as f64 + 0.5) * du).exp()).filter(|&r| r + GEOM_TOL >= d).map(|r| du / r).sum()
    }

    #[test]
    fn empty_direction_set_gives_zero() {
        let mu = DiscreteMeasure::new(vec![Point::new(0.0, 0.0), Point::new(0.0, 0.1)], vec![0.5, 0.5], 0.0).unwrap();
        let l = build_lattice(&mu, 0.125, 0.5, 3).unwrap();
        let r = compute_energies(&l, &mu, &DirectionSet::empty(8).unwrap(), &vertical(), &params(4.0, true)).unwrap();
        assert!(r.e_g.iter().all(|&e| e == 0.0));
        assert_eq!(r.global_g, 0.0);
    }

    #[test]
    fn two_vertical_atoms() {
        let d = 0.1;
        let mu = DiscreteMeasure::new(vec![Point::new(0.0, 0.0), Point::new(0.0, d)], vec![0.5, 0.5], 0.0).unwrap();
        let l = build_lattice(&mu, 0.125, 0.5, 3).unwrap();
        let g = cell_set(0.24, 0.26);
        let a = 4.0;
        let r = compute_energies(&l, &mu, &g, &vertical(), &params(a, true)).unwrap();
        for c in &l.cubes {
            let domain = AnisoRect::standard(c.center, c.side, l.aspect).scaled(2.0 * a);
            let inside: f64 = mu.points().iter().zip(mu.weights()).filter(|(p, _)| domain.contains(**p)).map(|(_, w)| w).sum();
            let expect = inside * 0.5 * two_atom_sum(c.tall / a, a.powi(3) * c.tall, 16, d) / c.mass;
            assert!((r.e_g[c.id] - expect).abs() <= 1e-12 * expect.max(1e-300), "cube {}", c.id);
        }
        let tol = 1e-12 * r.e_j.iter().copied().fold(0.0, f64::max);
        assert!(r.additivity_defect() <= 1e-12 || r.e_j.iter().zip(&r.e_j_int).all(|(a, b)| (a - b).abs() <= tol));
        assert!(r.e_j_ext.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn horizontal_segment_has_no_vertical_energy() {
        let pts: Vec<Point> = (0..50).map(|i| Point::new(i as f64 / 50.0, 0.0)).collect();
        let mu = DiscreteMeasure::new(pts, vec![0.02; 50], 0.02).unwrap();
        let l = build_lattice(&mu, 0.125, 0.5, 4).unwrap();
        let g = cell_set(0.24, 0.26);
        let r = compute_energies(&l, &mu, &g, &vertical(), &params(8.0, true)).unwrap();
        assert!(r.e_g.iter().all(|&e| e == 0.0));
        assert!(r.e_j.iter().chain(&r.e_j_ext_tilde).all(|&e| e == 0.0));
    }

    fn chain_lattice() -> (DiscreteMeasure, CubeLattice) {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(Point::new(0.01 * i as f64, 0.05 * i as f64));
            pts.push(Point::new(0.6 + 0.03 * i as f64, 0.0));
        }
        let n = pts.len();
        let mu = DiscreteMeasure::new(pts, vec![1.0 / n as f64; n], 0.01).unwrap();
        let l = build_lattice(&mu, 0.125, 0.5, 5).unwrap();
        (mu, l)
    }

    /// Cubes below a BCE ancestor of the same tree, by ancestor walk.
    fn brute_corona(l: &CubeLattice, e: &[f64], thr: f64) -> (Vec<bool>, Vec<usize>) {
        let n = l.cubes.len();
        let mut bce = vec![false; n];
        let mut root = vec![usize::MAX; n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&c| l.cubes[c].level);
        for c in order {
            let p = l.cubes[c].parent;
            root[c] = match p {
                None => c,
                Some(p) if bce[p] => c,
                Some(p) => root[p],
            };
            let mut s = 0.0;
            let mut cur = c;
            loop {
                s += e[cur];
                if cur == root[c] {
                    break;
                }
                cur = l.cubes[cur].parent.unwrap();
            }
            bce[c] = s >= thr;
        }
        (bce, root)
    }

    #[test]
    fn corona_matches_brute_force() {
        let (mu, l) = chain_lattice();
        let g = cell_set(0.2, 0.3);
        let r = compute_energies(&l, &mu, &g, &vertical(), &params(4.0, false)).unwrap();
        let h_j = vertical().measure();
        for delta in [0.0, 1e-3, 0.05, 0.5, 5.0, 1e6] {
            let k = build_corona(&l, &r.e_g, h_j, delta, 4.0).unwrap();
            let (bce, root) = brute_corona(&l, &r.e_g, delta * h_j);
            assert_eq!(k.is_bce, bce, "delta {delta}");
            for c in 0..l.cubes.len() {
                assert_eq!(k.trees[k.tree_of[c]].root, root[c]);
            }
            assert_eq!(k.trees.iter().map(|t| t.cubes.len()).sum::<usize>(), l.cubes.len());
            let (_, verdict) = check_tree_bounds(&k, &l, &r.e_g);
            verdict.unwrap();
            check_partition(&k, &l).unwrap();
        }
    }

    #[test]
    fn partition_detects_a_stolen_cube() {
        let (mu, l) = chain_lattice();
        let g = cell_set(0.2, 0.3);
        let r = compute_energies(&l, &mu, &g, &vertical(), &params(4.0, false)).unwrap();
        let mut k = build_corona(&l, &r.e_g, 0.125, 1e6, 4.0).unwrap();
        let stolen = k.trees[0].cubes.pop().unwrap();
        assert!(check_partition(&k, &l).is_err());
        k.trees[0].cubes.push(stolen);
        k.trees[0].cubes.push(stolen);
        assert!(check_partition(&k, &l).is_err());
    }

    #[test]
    fn corona_extremes() {
        let (mu, l) = chain_lattice();
        let g = cell_set(0.2, 0.3);
        let r = compute_energies(&l, &mu, &g, &vertical(), &params(4.0, false)).unwrap();
        let huge = build_corona(&l, &r.e_g, 0.125, 1e6, 4.0).unwrap();
        assert_eq!(huge.trees.len(), l.levels[0].len());
        assert!(huge.is_bce.iter().all(|b| !b));
        let p = check_packing(&huge, &l, &r);
        assert!((p.sum_top - mu.total()).abs() < 1e-12);
        let zero = build_corona(&l, &r.e_g, 0.125, 0.0, 4.0).unwrap();
        assert_eq!(zero.trees.len(), l.cubes.len());
        assert!(zero.trees.iter().all(|t| t.cubes == vec![t.root] && t.bce == vec![t.root]));
        let (rows, verdict) = check_tree_bounds(&zero, &l, &r.e_g);
        verdict.unwrap();
        assert!(rows.iter().all(|r| r.lhs_small == 0.0));
    }

    #[test]
    fn filling_gaps_with_full_g() {
        let (mu, _) = chain_lattice();
        let j = vertical();
        let g = DirectionSet::from_angle_interval(&j, 10).unwrap();
        let r = check_filling_gaps(&mu, &j, &g, 0.1, 10, 5, 7).unwrap();
        assert!(r.applicable);
        assert!(r.falsified.is_empty());
        assert!(r.max_ratio <= 1.0);
    }

    #[test]
    fn littlemeas_empty_gap_and_missing_witness() {
        let (mu, _) = chain_lattice();
        let empty = DirectionSet::empty(8).unwrap();
        let r = check_littlemeas(&mu, &empty, &[], 2.0, 20, 1).unwrap();
        assert_eq!(r.max_lhs, 0.0);
        let w = GapWitness { start: 0.2, end: 0.21, theta: None, sup_norm: 9.0 };
        let gap = DirectionSet::from_cells(8, [52]).unwrap();
        assert!(matches!(check_littlemeas(&mu, &gap, &[w], 2.0, 20, 1), Err(EnergyError::WitnessMissing { .. })));
    }

    #[test]
    fn overlap_sweep() {
        assert_eq!(max_overlap(&[(0.0, 1.0)]).0, 1);
        assert_eq!(max_overlap(&[(0.0, 1.0), (1.0, 2.0)]).0, 2);
        assert_eq!(max_overlap(&[(0.0, 1.0), (1.5, 2.0), (0.5, 1.7)]).0, 2);
        assert_eq!(max_overlap(&[(0.0, 3.0), (1.0, 2.0), (1.5, 1.6)]).0, 3);
    }

    #[test]
    fn cell_runs_merge() {
        let s = DirectionSet::from_cells(4, [1, 2, 3, 7, 9, 10]).unwrap();
        assert_eq!(cell_runs(&s), vec![(1.0 / 16.0, 4.0 / 16.0), (7.0 / 16.0, 0.5), (9.0 / 16.0, 11.0 / 16.0)]);
    }
}
