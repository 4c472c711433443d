//! Run parameters, the checker pipeline over one sample, and report bundles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::directions::{cmp_scaled, iterate_enlargement, DirectionError, DirectionSet, DyadicInterval};
use crate::energy::{
    build_corona, check_filling_gaps, check_partition, check_littlemeas, check_packing, check_projection_overlap, check_tree_bounds,
    check_trivial_bound, compute_energies, est4_ratio, find_gap_witnesses, write_energy_csv, CoronaDecomposition,
    EnergyError, EnergyParams, EnergyReport, FillingReport, LittleMeasReport, OverlapReport, PackingReport,
    TreeBoundsRow, TrivialBoundReport,
};
use crate::gaps::{
    check_empty_cones, extract_graph_parallel_segments, find_bad_cubes, reverify_frozen, verify_all, BadCube,
    EmptyConeReport, GapError, GapParams, GapVerdict, GraphReport, VerdictStatus,
};
use crate::geometry::{AngleInterval, Direction};
use crate::lattice::{build_lattice, cube_mass_bounds, CubeLattice, LatticeError, MassBoundsReport};
use crate::sets::{
    check_cone_energy_bound, direction_spectrum, ConeEnergyReport, DiscreteMeasure, MeasureError, PlanarSet,
    QuadParams,
};
use crate::svg;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error(transparent)]
    Direction(#[from] DirectionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Source of the good direction set `G`.
#[derive(Clone, Debug, PartialEq)]
pub enum GSpec {
    /// `G = J` on the bitset grid.
    J,
    /// `J` minus its last cell.
    JMinusEdge,
    /// `J` minus a fraction of its cells, taken from the upper end.
    JMinusFraction(f64),
    /// `J ∩ G_T`, the avoided directions of a coarse resample of the set.
    Spectrum,
    Bits(DirectionSet),
}

impl GSpec {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let t = text.trim();
        Ok(match t {
            "j" => GSpec::J,
            "j-minus-edge" => GSpec::JMinusEdge,
            "spectrum" => GSpec::Spectrum,
            _ if t.starts_with("j-minus-fraction:") => {
                let f: f64 = t["j-minus-fraction:".len()..]
                    .parse()
                    .map_err(|_| PipelineError::Invalid(format!("bad G spec `{t}`")))?;
                GSpec::JMinusFraction(f)
            }
            _ if t.starts_with("depth=") => GSpec::Bits(DirectionSet::from_text(t)?),
            _ => return Err(PipelineError::Invalid(format!("unknown G spec `{t}`"))),
        })
    }

    pub fn label(&self) -> String {
        match self {
            GSpec::J => "j".into(),
            GSpec::JMinusEdge => "j-minus-edge".into(),
            GSpec::JMinusFraction(f) => format!("j-minus-fraction:{f}"),
            GSpec::Spectrum => "spectrum".into(),
            GSpec::Bits(b) => b.to_text(),
        }
    }

    pub fn resolve(&self, params: &RunParams, set: &PlanarSet) -> Result<DirectionSet, PipelineError> {
        let jset = params.jset()?;
        Ok(match self {
            GSpec::J => jset,
            GSpec::JMinusEdge => {
                let mut g = jset.clone();
                if let Some(last) = jset.cells().last() {
                    g.set_cell(last, false);
                }
                g
            }
            GSpec::JMinusFraction(f) => {
                let cells: Vec<usize> = jset.cells().collect();
                let drop = ((cells.len() as f64) * f).ceil() as usize;
                let mut g = jset.clone();
                for &c in cells.iter().rev().take(drop) {
                    g.set_cell(c, false);
                }
                g
            }
            GSpec::Spectrum => {
                let g_t = avoided_directions(set, params.spectrum_h, params.g_depth)?;
                jset.intersection(&g_t)
            }
            GSpec::Bits(b) => {
                if b.depth() != params.g_depth {
                    return Err(PipelineError::Invalid(format!(
                        "G has depth {} but g_depth = {}",
                        b.depth(),
                        params.g_depth
                    )));
                }
                b.clone()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnlargementSummary {
    pub j0: String,
    pub s: f64,
    pub eps: f64,
    pub k0: u64,
    pub bound: u64,
    /// `ℋ(G_k)/ℋ(J₀)` for `k = 0..=k₀`.
    pub fractions: Vec<f64>,
}

/// Runs the enlargement iteration from `G_T ∩ J₀`, where `J₀` is the first
/// dyadic interval of depth at most 4 with `ℋ(J₀ ∩ G_T) ≥ s·ℋ(J₀)`, and
/// verifies every step. `None` when no such interval exists.
pub fn enlargement_from_avoided(
    g_t: &DirectionSet,
    eps: f64,
    s: f64,
) -> Result<Option<EnlargementSummary>, PipelineError> {
    let d = g_t.depth();
    for depth in 0..=4.min(d) {
        for index in 0..(1u64 << depth) {
            let j0 = DyadicInterval::new(depth, index)?;
            let size = j0.cells(d).len() as u64;
            let cnt = g_t.count_in(j0);
            if cnt == 0 || cmp_scaled(size, s, cnt) == std::cmp::Ordering::Greater {
                continue;
            }
            let g0 = g_t.intersection(&DirectionSet::from_intervals(d, [j0])?);
            let it = iterate_enlargement(j0, &g0, eps, s)?;
            for t in &it.traces {
                t.verify(eps)?;
            }
            let mut fractions = vec![g0.count() as f64 / size as f64];
            fractions.extend(it.traces.iter().map(|t| t.g_out.count() as f64 / size as f64));
            return Ok(Some(EnlargementSummary { j0: j0.to_string(), s, eps, k0: it.k0, bound: it.bound, fractions }));
        }
    }
    Ok(None)
}

/// `G_T(E)`: complement of the chord directions of a resample at mass
/// resolution `h`.
pub fn avoided_directions(set: &PlanarSet, h: f64, depth: u32) -> Result<DirectionSet, PipelineError> {
    let coarse = DiscreteMeasure::sample(set, h)?;
    Ok(direction_spectrum(&coarse, depth)?.complement())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunParams {
    pub j_center: f64,
    pub j_halfwidth: f64,
    pub g_depth: u32,
    pub g: GSpec,
    pub eps: f64,
    pub delta: f64,
    pub a: f64,
    pub rho: f64,
    pub depth: usize,
    pub m: f64,
    pub c0: f64,
    pub c1: f64,
    pub c_prime: f64,
    /// Mass resolution of the sample.
    pub h: f64,
    pub n_angles: usize,
    pub quad: usize,
    pub seed: u64,
    pub bin_width: f64,
    pub c_overlap: usize,
    pub with_j: bool,
    pub gap_lemma: bool,
    pub trials: usize,
    pub radii: usize,
    pub graph: bool,
    pub graph_s: f64,
    pub graph_h: f64,
    pub spectrum_h: f64,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            j_center: 0.25,
            j_halfwidth: 1.0 / 16.0,
            g_depth: 8,
            g: GSpec::J,
            eps: 0.1,
            delta: 1.0 / 32.0,
            a: 16.0,
            rho: 0.5,
            depth: 2,
            m: 3.0,
            c0: 2.0,
            c1: 1.0 / 64.0,
            c_prime: 4.0,
            h: 8e-5,
            n_angles: 4096,
            quad: 16,
            seed: 1,
            bin_width: 1e-2,
            c_overlap: 8,
            with_j: false,
            gap_lemma: true,
            trials: 200,
            radii: 8,
            graph: false,
            graph_s: 0.5,
            graph_h: 2.5e-3,
            spectrum_h: 5e-3,
        }
    }
}

impl RunParams {
    pub fn from_kv(kv: &KeyValues) -> Result<Self, PipelineError> {
        let d = RunParams::default();
        let p = RunParams {
            j_center: kv.get_or("j_center", d.j_center)?,
            j_halfwidth: kv.get_or("j_halfwidth", d.j_halfwidth)?,
            g_depth: kv.get_or("g_depth", d.g_depth)?,
            g: match kv.raw("g") {
                Some(t) => GSpec::parse(t)?,
                None => d.g,
            },
            eps: kv.get_or("eps", d.eps)?,
            delta: kv.get_or("delta", d.delta)?,
            a: kv.get_or("a", d.a)?,
            rho: kv.get_or("rho", d.rho)?,
            depth: kv.get_or("depth", d.depth)?,
            m: kv.get_or("m", d.m)?,
            c0: kv.get_or("c0", d.c0)?,
            c1: kv.get_or("c1", d.c1)?,
            c_prime: kv.get_or("c_prime", d.c_prime)?,
            h: kv.get_or("h", d.h)?,
            n_angles: kv.get_or("n_angles", d.n_angles)?,
            quad: kv.get_or("quad", d.quad)?,
            seed: kv.get_or("seed", d.seed)?,
            bin_width: kv.get_or("bin_width", d.bin_width)?,
            c_overlap: kv.get_or("c_overlap", d.c_overlap)?,
            with_j: kv.get_or("with_j", d.with_j)?,
            gap_lemma: kv.get_or("gap_lemma", d.gap_lemma)?,
            trials: kv.get_or("trials", d.trials)?,
            radii: kv.get_or("radii", d.radii)?,
            graph: kv.get_or("graph", d.graph)?,
            graph_s: kv.get_or("graph_s", d.graph_s)?,
            graph_h: kv.get_or("graph_h", d.graph_h)?,
            spectrum_h: kv.get_or("spectrum_h", d.spectrum_h)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("j_center", self.j_center);
        kv.set("j_halfwidth", self.j_halfwidth);
        kv.set("g_depth", self.g_depth);
        kv.set("g", self.g.label());
        kv.set("eps", self.eps);
        kv.set("delta", self.delta);
        kv.set("a", self.a);
        kv.set("rho", self.rho);
        kv.set("depth", self.depth);
        kv.set("m", self.m);
        kv.set("c0", self.c0);
        kv.set("c1", self.c1);
        kv.set("c_prime", self.c_prime);
        kv.set("gap_n", self.gap_params().n);
        kv.set("h", self.h);
        kv.set("n_angles", self.n_angles);
        kv.set("quad", self.quad);
        kv.set("seed", self.seed);
        kv.set("bin_width", self.bin_width);
        kv.set("c_overlap", self.c_overlap);
        kv.set("with_j", self.with_j);
        kv.set("gap_lemma", self.gap_lemma);
        kv.set("trials", self.trials);
        kv.set("radii", self.radii);
        kv.set("graph", self.graph);
        kv.set("graph_s", self.graph_s);
        kv.set("graph_h", self.graph_h);
        kv.set("spectrum_h", self.spectrum_h);
        kv
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Invalid(m));
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(self.j_halfwidth > 0.0 && self.j_halfwidth <= 0.25) {
            return bad(format!("j_halfwidth must lie in (0, 1/4], got {}", self.j_halfwidth));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if !(self.a >= 1.0 && self.a.is_finite()) {
            return bad(format!("A must be >= 1, got {}", self.a));
        }
        if !(self.rho > 0.0 && self.rho <= 0.5) {
            return bad(format!("rho must lie in (0, 1/2], got {}", self.rho));
        }
        if self.depth == 0 {
            return bad("depth must be positive".into());
        }
        if !(self.m > 0.0 && self.c0 > 0.0 && self.c1 > 0.0 && self.c_prime > 0.0) {
            return bad("M, C0, c1 and C' must be positive".into());
        }
        if !(self.h > 0.0 && self.bin_width > 0.0 && self.graph_h > 0.0 && self.spectrum_h > 0.0) {
            return bad("resolutions must be positive".into());
        }
        if self.quad < 16 {
            return bad(format!("quad must be >= 16 nodes per decade, got {}", self.quad));
        }
        if self.g_depth == 0 || self.g_depth > crate::directions::MAX_DEPTH {
            return bad(format!("g_depth must lie in 1..=16, got {}", self.g_depth));
        }
        if !(self.graph_s > 0.0 && self.graph_s <= 1.0) {
            return bad(format!("graph_s must lie in (0, 1], got {}", self.graph_s));
        }
        Ok(())
    }

    pub fn j(&self) -> AngleInterval {
        AngleInterval { center: Direction::new(self.j_center), halfwidth: self.j_halfwidth }
    }

    pub fn jset(&self) -> Result<DirectionSet, PipelineError> {
        Ok(DirectionSet::from_angle_interval(&self.j(), self.g_depth)?)
    }

    /// `aspect = ℋ(J)`.
    pub fn aspect(&self) -> f64 {
        self.j().measure()
    }

    pub fn energy_params(&self) -> EnergyParams {
        EnergyParams { a: self.a, quad: QuadParams { nodes_per_decade: self.quad }, with_j: self.with_j }
    }

    pub fn gap_params(&self) -> GapParams {
        GapParams::new(self.a, self.c_prime, self.m, self.c0)
    }

    /// `ℋ(J) ≤ c₁/(C₀M)`.
    pub fn c1_hypothesis(&self) -> bool {
        self.aspect() <= self.c1 / (self.c0 * self.m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, ok: bool, detail: impl Into<String>) -> Self {
        CheckResult { name, status: if ok { CheckStatus::Pass } else { CheckStatus::Fail }, detail: detail.into() }
    }

    fn skipped(name: &'static str, detail: impl Into<String>) -> Self {
        CheckResult { name, status: CheckStatus::Skipped, detail: detail.into() }
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Fail
    }
}

/// Checker names, in report order.
pub const CHECKS: [&str; 12] = [
    "lattice",
    "density",
    "g_window",
    "enlargement",
    "tree_bounds",
    "trivial_bound",
    "overlap",
    "empty_cones",
    "gap_lemma",
    "graph",
    "filling_gaps",
    "littlemeas",
];

/// Gap-lemma traces computed on another sample, re-checked against this one.
#[derive(Clone, Debug)]
pub struct FrozenGap {
    pub lattice: CubeLattice,
    pub verdicts: Vec<GapVerdict>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// `G_T` for the graph check; recomputed from the set when absent.
    pub graph_g_t: Option<DirectionSet>,
    pub frozen: Option<FrozenGap>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub name: String,
    pub params: RunParams,
    pub echo: KeyValues,
    pub mu: DiscreteMeasure,
    pub g: DirectionSet,
    pub lattice: CubeLattice,
    pub energy: EnergyReport,
    pub corona: CoronaDecomposition,
    pub tree_rows: Vec<TreeBoundsRow>,
    pub packing: PackingReport,
    pub trivial: TrivialBoundReport,
    pub empty_cones: EmptyConeReport,
    pub overlap: OverlapReport,
    pub bad: Vec<BadCube>,
    pub verdicts: Vec<GapVerdict>,
    pub littlemeas: Option<LittleMeasReport>,
    pub filling: FillingReport,
    pub cone_energy: ConeEnergyReport,
    pub mass_bounds: Option<MassBoundsReport>,
    pub graph: Option<Result<GraphReport, String>>,
    pub enlargement: Option<EnlargementSummary>,
    pub checks: Vec<CheckResult>,
    pub ratios: BTreeMap<String, f64>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        !self.checks.iter().any(CheckResult::failed)
    }

    pub fn first_failure(&self) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.failed())
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| c.failed()).map(|c| c.name).collect()
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn gap_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for v in &self.verdicts {
            let k = match v.status {
                VerdictStatus::Pass => "pass",
                VerdictStatus::Fail(_) => "fail",
                VerdictStatus::NotFound => "not_found",
                VerdictStatus::Skipped(_) => "skipped",
                VerdictStatus::NotApplicable(_) => "not_applicable",
            };
            *m.entry(k).or_insert(0) += 1;
        }
        m
    }

    pub fn summary_json(&self) -> Value {
        let hist: Vec<Value> = self.corona.size_histogram().into_iter().map(|(s, c)| json!([s, c])).collect();
        json!({
            "name": self.name,
            "params": self.echo.iter().map(|(k, v)| (k.to_string(), Value::String(v.to_string()))).collect::<serde_json::Map<_, _>>(),
            "passed": self.passed(),
            "checks": self.checks,
            "ratios": self.ratios,
            "n_points": self.mu.len(),
            "n_cubes": self.lattice.cubes.len(),
            "lattice": {"top_level": self.lattice.top_level, "c_in": self.lattice.c_in, "c_out": self.lattice.c_out},
            "corona": {"n_trees": self.corona.trees.len(), "n_layers": self.corona.n_layers(), "tree_sizes": hist},
            "gap_lemma": self.gap_counts(),
            "c1_hypothesis": self.params.c1_hypothesis(),
            "enlargement": self.enlargement,
        })
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6e}")
}

/// Runs every checker on `mu` (sampled from `set`) with direction set `g`.
pub fn run_pipeline(
    name: &str,
    set: &PlanarSet,
    mu: DiscreteMeasure,
    g: DirectionSet,
    params: &RunParams,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    params.validate()?;
    let j = params.j();
    let jset = params.jset()?;
    let h_j = params.aspect();
    let mut checks = Vec::new();
    let mut ratios = BTreeMap::new();

    let lattice = build_lattice(&mu, h_j, params.rho, params.depth)?;
    let inv = lattice.check_invariants(mu.len());
    checks.push(CheckResult::new(
        "lattice",
        inv.is_ok(),
        match &inv {
            Ok(()) => format!("{} cubes, c_in = {}, C_out = {}", lattice.cubes.len(), fmt_f(lattice.c_in), fmt_f(lattice.c_out)),
            Err(e) => e.clone(),
        },
    ));
    ratios.insert("lattice_c_in".into(), lattice.c_in);
    ratios.insert("lattice_c_out".into(), lattice.c_out);

    let mass_bounds = match cube_mass_bounds(&lattice, &mu, params.m, params.c0, params.bin_width) {
        Ok(r) => Some(r),
        Err(LatticeError::HypothesisUnverified(_)) => None,
        Err(e) => return Err(e.into()),
    };
    checks.push(CheckResult::new(
        "density",
        mass_bounds.is_some(),
        match &mass_bounds {
            Some(r) => format!("θ₀ = {}, sup = {} ≤ M = {}", r.theta0.turns(), fmt_f(r.density_sup), params.m),
            None => format!("no direction near 1/4 has density ≤ M = {}", params.m),
        },
    ));
    if let Some(r) = &mass_bounds {
        ratios.insert("density_sup".into(), r.density_sup);
        ratios.insert("mass_upper_c".into(), r.measured_c);
        ratios.insert("mass_lower_min".into(), r.min_lower_ratio);
    }

    let inside = g.is_subset(&jset);
    let big = cmp_scaled(jset.count(), 1.0 - params.eps, g.count()) != std::cmp::Ordering::Greater;
    checks.push(CheckResult::new(
        "g_window",
        inside && big,
        format!("G ⊆ J: {inside}; #G = {} vs (1−ε)#J = {}", g.count(), (1.0 - params.eps) * jset.count() as f64),
    ));

    let g_t = match &opts.graph_g_t {
        Some(g) => g.clone(),
        None => avoided_directions(set, params.spectrum_h, params.g_depth)?,
    };
    let enlargement = match enlargement_from_avoided(&g_t, params.eps, params.graph_s) {
        Ok(None) => {
            checks.push(CheckResult::skipped("enlargement", "no dyadic interval is s-dense in G_T"));
            None
        }
        Ok(Some(e)) => {
            checks.push(CheckResult::new(
                "enlargement",
                true,
                format!("J₀ = {}: k₀ = {} ≤ {}", e.j0, e.k0, e.bound),
            ));
            Some(e)
        }
        Err(e) => {
            checks.push(CheckResult::new("enlargement", false, e.to_string()));
            None
        }
    };

    let energy = compute_energies(&lattice, &mu, &g, &j, &params.energy_params())?;
    let corona = build_corona(&lattice, &energy.e_g, h_j, params.delta, params.a)?;
    let (tree_rows, tb) = check_tree_bounds(&corona, &lattice, &energy.e_g);
    let tb = tb.and_then(|()| check_partition(&corona, &lattice));
    checks.push(CheckResult::new(
        "tree_bounds",
        tb.is_ok(),
        match &tb {
            Ok(()) => format!("{} trees", corona.trees.len()),
            Err(e) => e.to_string(),
        },
    ));
    let max_upper = tree_rows.iter().map(|r| r.upper_ratio).fold(0.0, f64::max);
    ratios.insert("tree_upper_ratio_max".into(), max_upper);

    let packing = check_packing(&corona, &lattice, &energy);
    ratios.insert("packing_ratio".into(), packing.ratio);

    let trivial = check_trivial_bound(&energy.e_g, params.a, params.m, params.c0, h_j);
    checks.push(CheckResult::new(
        "trivial_bound",
        trivial.violations.is_empty(),
        format!("max E_G = {} vs bound {}", fmt_f(trivial.max_energy), fmt_f(trivial.bound)),
    ));
    ratios.insert("trivial_ratio".into(), trivial.max_ratio);

    let empty_cones = check_empty_cones(&corona, &lattice, &mu, &j, params.a);
    let overlap = check_projection_overlap(&corona, &lattice, &empty_cones.tree_ok, params.c_overlap);
    checks.push(CheckResult::new(
        "overlap",
        overlap.violation.is_none(),
        match &overlap.violation {
            None => format!("max overlap {} ≤ {}", overlap.max_overlap, params.c_overlap),
            Some(r) => format!("root {} level {}: {} intervals meet at {}", r.root, r.level, r.max_overlap, r.at),
        },
    ));
    ratios.insert("overlap_max".into(), overlap.max_overlap as f64);
    checks.push(CheckResult::new(
        "empty_cones",
        empty_cones.all_pass(),
        match empty_cones.witnesses.first() {
            None => format!("{} trees pass", empty_cones.tree_ok.len()),
            Some(w) => format!(
                "{} of {} trees fail; root {}: points {} and {}",
                empty_cones.witnesses.len(),
                empty_cones.tree_ok.len(),
                w.root,
                w.x,
                w.y
            ),
        },
    ));

    let gp = params.gap_params();
    let bad = find_bad_cubes(&corona, &lattice, &mu, &j);
    let verdicts = match (&opts.frozen, params.gap_lemma) {
        (Some(f), _) => f.verdicts.iter().map(|v| reverify_frozen(v, &f.lattice, &mu, &gp)).collect(),
        (None, true) => verify_all(&lattice, &mu, &bad, &empty_cones.tree_ok, &gp),
        (None, false) => Vec::new(),
    };
    if params.gap_lemma || opts.frozen.is_some() {
        let bad_v: Vec<&GapVerdict> =
            verdicts.iter().filter(|v| matches!(v.status, VerdictStatus::Fail(_) | VerdictStatus::NotFound)).collect();
        let n_pass = verdicts.iter().filter(|v| v.status == VerdictStatus::Pass).count();
        checks.push(CheckResult::new(
            "gap_lemma",
            bad_v.is_empty(),
            match bad_v.first() {
                None => format!("{n_pass} verified of {} Bad cubes", bad.len()),
                Some(v) => format!("cube {} (root {}): {:?}", v.cube, v.root, v.status),
            },
        ));
    } else {
        checks.push(CheckResult::skipped("gap_lemma", "disabled"));
    }
    let lb: Vec<f64> = verdicts.iter().filter_map(|v| v.measured.get("l_b_over_l_q").copied()).collect();
    if !lb.is_empty() {
        ratios.insert("l_b_over_l_q_min".into(), lb.iter().copied().fold(f64::INFINITY, f64::min));
        ratios.insert("l_b_over_l_q_max".into(), lb.iter().copied().fold(0.0, f64::max));
    }

    let graph = if params.graph {
        Some(
            extract_graph_parallel_segments(set, &g_t, params.graph_s, params.graph_h, params.bin_width)
                .map_err(|e| e.to_string()),
        )
    } else {
        None
    };
    match &graph {
        None => checks.push(CheckResult::skipped("graph", "disabled")),
        Some(Ok(r)) => {
            ratios.insert("graph_lip".into(), r.lip);
            ratios.insert("graph_density_c".into(), r.density_c);
            checks.push(CheckResult::new(
                "graph",
                true,
                format!("θ = {}, lip = {} ≤ {}, density·s = {}", r.theta.turns(), fmt_f(r.lip), r.lip_bound, fmt_f(r.density_c)),
            ))
        }
        Some(Err(e)) => checks.push(CheckResult::new("graph", false, e.clone())),
    }

    let filling = check_filling_gaps(&mu, &j, &g, params.eps, params.trials / 4, params.radii, params.seed)?;
    checks.push(CheckResult::new(
        "filling_gaps",
        filling.falsified.is_empty(),
        if !filling.applicable {
            "not applicable: ℋ(J\\G) > εℋ(J)".to_string()
        } else {
            format!("{} falsifying samples of {}", filling.falsified.len(), filling.samples)
        },
    ));
    if filling.applicable {
        ratios.insert("filling_max_ratio".into(), filling.max_ratio);
    }

    let gap_set = jset.difference(&g);
    let witnesses = find_gap_witnesses(&mu, &gap_set, params.m, params.bin_width)?;
    let littlemeas = check_littlemeas(&mu, &gap_set, &witnesses, params.m, params.trials, params.seed);
    checks.push(CheckResult::new(
        "littlemeas",
        littlemeas.is_ok(),
        match &littlemeas {
            Ok(r) => format!("{} gaps, max C = {}", r.n_gaps, fmt_f(r.max_c)),
            Err(e) => e.to_string(),
        },
    ));
    let littlemeas = littlemeas.ok();
    if let Some(r) = &littlemeas {
        ratios.insert("littlemeas_max_c".into(), r.max_c);
    }

    let cone_energy =
        check_cone_energy_bound(&mu, &g, params.m, QuadParams { nodes_per_decade: params.quad })?;
    if let Some(r) = cone_energy.ratio {
        ratios.insert("cone_energy_ratio".into(), r);
    }
    if let Some(r) = est4_ratio(&lattice, &energy) {
        ratios.insert("est4_ratio".into(), r);
        ratios.insert("additivity_defect".into(), energy.additivity_defect());
    }

    Ok(RunOutcome {
        name: name.to_string(),
        params: params.clone(),
        echo: params.to_kv(),
        mu,
        g,
        lattice,
        energy,
        corona,
        tree_rows,
        packing,
        trivial,
        empty_cones,
        overlap,
        bad,
        verdicts,
        littlemeas,
        filling,
        cone_energy,
        mass_bounds,
        graph,
        enlargement,
        checks,
        ratios,
    })
}

/// `# key = value` lines for the top of text outputs.
pub fn header(echo: &KeyValues) -> String {
    let mut s = String::new();
    for (k, v) in echo.iter() {
        let _ = writeln!(s, "# {k} = {v}");
    }
    s
}

fn write_with_header(path: &Path, echo: &KeyValues, body: &[u8]) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path)?;
    f.write_all(header(echo).as_bytes())?;
    f.write_all(body)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(MeasureError::from)?;
    }
    w.into_inner().map_err(|e| PipelineError::Invalid(e.to_string()))
}

#[derive(Serialize)]
struct OverlapCsvRow {
    root: usize,
    level: i32,
    n_cubes: usize,
    max_overlap: usize,
    applicable: bool,
}

#[derive(Serialize)]
struct RatioRow<'a> {
    name: &'a str,
    value: f64,
}

/// Writes the report bundle of one run into `dir`; returns the file names.
pub fn write_bundle(outcome: &RunOutcome, dir: &Path) -> Result<Vec<String>, PipelineError> {
    fs::create_dir_all(dir)?;
    let echo = &outcome.echo;
    let mut files = Vec::new();
    let mut put = |name: &str, body: Vec<u8>| -> Result<(), PipelineError> {
        write_with_header(&dir.join(name), echo, &body)?;
        files.push(name.to_string());
        Ok(())
    };
    let mut energies = Vec::new();
    write_energy_csv(&mut energies, &outcome.lattice, &outcome.energy, Some(&outcome.corona))?;
    put("energies.csv", energies)?;
    put("tree_bounds.csv", csv_bytes(&outcome.tree_rows)?)?;
    let orows: Vec<OverlapCsvRow> = outcome
        .overlap
        .rows
        .iter()
        .map(|r| OverlapCsvRow { root: r.root, level: r.level, n_cubes: r.n_cubes, max_overlap: r.max_overlap, applicable: r.applicable })
        .collect();
    put("overlap.csv", csv_bytes(&orows)?)?;
    let rrows: Vec<RatioRow> = outcome.ratios.iter().map(|(k, v)| RatioRow { name: k, value: *v }).collect();
    put("ratios.csv", csv_bytes(&rrows)?)?;
    put("checks.csv", csv_bytes(&outcome.checks)?)?;
    let mut lat = Vec::new();
    outcome.lattice.write_jsonl(&mut lat)?;
    put("lattice.jsonl", lat)?;
    let mut verdicts = Vec::new();
    for v in &outcome.verdicts {
        serde_json::to_writer(&mut verdicts, v)?;
        verdicts.push(b'\n');
    }
    put("gap_verdicts.jsonl", verdicts)?;
    let mut sample = Vec::new();
    outcome.mu.write_csv(&mut sample)?;
    put("sample.csv", sample)?;
    let summary = serde_json::to_vec_pretty(&outcome.summary_json())?;
    fs::write(dir.join("summary.json"), summary)?;
    files.push("summary.json".into());
    fs::write(dir.join("params.txt"), echo.to_string())?;
    files.push("params.txt".into());
    for v in &outcome.verdicts {
        if matches!(v.status, VerdictStatus::Fail(_) | VerdictStatus::NotFound) {
            let name = format!("gap_cube_{}.svg", v.cube);
            fs::write(dir.join(&name), svg::gap_case(v, &outcome.mu, echo))?;
            files.push(name);
        }
    }
    Ok(files)
}
