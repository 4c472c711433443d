//! Gaps in projections near root cubes, the empty-cone and Bad-cube scans,
//! the leftist-rectangle search with its gap-extraction verifier, and the
//! graph extractor for parallel-segment sets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::directions::{DirectionError, DirectionSet};
use crate::energy::CoronaDecomposition;
use crate::geometry::{radial_ok, AngleInterval, Direction, Point, GEOM_TOL};
use crate::lattice::{sorted_by_x, CubeLattice};
use crate::sets::{pushforward_density, ConeIndex, DiscreteMeasure, MeasureError, PlanarSet, Primitive};

#[derive(Debug, Error)]
pub enum GapError {
    #[error("not a graph: pair {a:?}, {b:?} has slope {lip} over the chosen line")]
    NotAGraph { a: Point, b: Point, lip: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Direction(#[from] DirectionError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Components of `U(R) \ π₀(A𝒭_R ∩ sample)`, the sample thickened by `h`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapSet {
    pub root: usize,
    pub u: (f64, f64),
    pub thickening: f64,
    /// Sorted, pairwise disjoint open intervals.
    pub gaps: Vec<(f64, f64)>,
}

impl GapSet {
    pub fn total_length(&self) -> f64 {
        self.gaps.iter().map(|g| g.1 - g.0).sum()
    }

    /// `𝒦(R, r)`: gaps with length in `[r/A, A·r]`.
    pub fn filter(&self, r: f64, a: f64) -> Vec<(f64, f64)> {
        self.gaps.iter().copied().filter(|g| g.1 - g.0 >= r / a && g.1 - g.0 <= a * r).collect()
    }

    /// The gap containing `[lo, hi]`, if any.
    pub fn containing(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        self.gaps.iter().copied().find(|g| g.0 <= lo + GEOM_TOL && g.1 >= hi - GEOM_TOL)
    }

    /// Image under `x ↦ −x` when `sx < 0`.
    pub fn reflected(&self, sx: f64) -> GapSet {
        if sx > 0.0 {
            return self.clone();
        }
        let mut gaps: Vec<(f64, f64)> = self.gaps.iter().map(|g| (-g.1, -g.0)).collect();
        gaps.reverse();
        GapSet { u: (-self.u.1, -self.u.0), gaps, ..self.clone() }
    }
}

/// Complement of `⋃ [v − h, v + h]` inside `u`.
pub fn complement_gaps(values: &mut [f64], u: (f64, f64), h: f64) -> Vec<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let mut gaps = Vec::new();
    let mut cursor = u.0;
    for &v in values.iter() {
        let (lo, hi) = (v - h, v + h);
        if lo > cursor && cursor < u.1 {
            gaps.push((cursor, lo.min(u.1)));
        }
        cursor = cursor.max(hi);
    }
    if cursor < u.1 {
        gaps.push((cursor, u.1));
    }
    gaps.retain(|g| g.1 > g.0);
    gaps
}

pub fn find_gaps(lattice: &CubeLattice, mu: &DiscreteMeasure, root: usize, a: f64) -> GapSet {
    let cube = lattice.cube(root);
    let rect = lattice.cube_rect(root).scaled(a);
    let half = a * cube.side / 2.0;
    let u = (cube.center.x - half, cube.center.x + half);
    let mut values: Vec<f64> = mu.points().iter().filter(|p| rect.contains(**p)).map(|p| p.x).collect();
    let h = mu.spacing();
    GapSet { root, u, thickening: h, gaps: complement_gaps(&mut values, u, h) }
}

/// Sample indices in a closed axis-parallel box.
fn points_in_box(mu: &DiscreteMeasure, by_x: &[usize], lo: Point, hi: Point, mut f: impl FnMut(usize)) {
    let pts = mu.points();
    let start = by_x.partition_point(|&i| pts[i].x < lo.x - GEOM_TOL);
    for &i in &by_x[start..] {
        let p = pts[i];
        if p.x > hi.x + GEOM_TOL {
            break;
        }
        if p.y >= lo.y - GEOM_TOL && p.y <= hi.y + GEOM_TOL {
            f(i);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmptyConeWitness {
    pub tree: usize,
    pub root: usize,
    pub x: usize,
    pub y: usize,
    pub r_in: f64,
    pub r_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmptyConeReport {
    pub tree_ok: Vec<bool>,
    /// First witness per failing tree.
    pub witnesses: Vec<EmptyConeWitness>,
}

impl EmptyConeReport {
    pub fn all_pass(&self) -> bool {
        self.tree_ok.iter().all(|&b| b)
    }
}

/// For every tree: no sample point `x ∈ A𝒭_Q`, `Q ∈ Tree \ BCE`, sees a
/// sample point in `X(x, 0.5J, 𝖫(Q)/A, A²𝖫(R))`.
pub fn check_empty_cones(
    corona: &CoronaDecomposition,
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    j: &AngleInterval,
    a: f64,
) -> EmptyConeReport {
    let jh = j.dilate(0.5);
    let hull = Some((jh.center, jh.halfwidth));
    let index = ConeIndex::new(mu);
    let by_x = sorted_by_x(mu);
    let pts = mu.points();
    let exclude = mu.spacing();
    let results: Vec<Option<EmptyConeWitness>> = (0..corona.trees.len())
        .into_par_iter()
        .map(|ti| {
            let tree = &corona.trees[ti];
            let r_out = a * a * lattice.cube(tree.root).tall;
            let mut r_in: BTreeMap<usize, f64> = BTreeMap::new();
            for q in corona.inner(ti) {
                let c = lattice.cube(q);
                let rect = lattice.cube_rect(q).scaled(a);
                let half = Point::new(rect.short / 2.0, rect.long / 2.0);
                let lo = c.tall / a;
                points_in_box(mu, &by_x, c.center - half, c.center + half, |i| {
                    let e = r_in.entry(i).or_insert(f64::INFINITY);
                    *e = e.min(lo);
                });
            }
            for (&i, &lo) in &r_in {
                let x = pts[i];
                let mut hit: Option<usize> = None;
                index.for_each_candidate(x, hull, r_out, |k| {
                    let v = pts[k] - x;
                    let d = v.norm();
                    if d > exclude && radial_ok(d, lo, r_out) && jh.contains_line(v) && hit.is_none_or(|h| k < h) {
                        hit = Some(k);
                    }
                });
                if let Some(y) = hit {
                    return Some(EmptyConeWitness { tree: ti, root: tree.root, x: i, y, r_in: lo, r_out });
                }
            }
            None
        })
        .collect();
    EmptyConeReport {
        tree_ok: results.iter().map(Option::is_none).collect(),
        witnesses: results.into_iter().flatten().collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BadCube {
    pub tree: usize,
    pub root: usize,
    pub cube: usize,
    pub x: usize,
    pub y: usize,
}

/// Cubes `Q` with some sample `x ∈ Q` and `y ∈ X(x, 3J \ 0.5J, ρ𝖫(Q), 𝖫(Q))`;
/// the witness has the smallest `x`, then the smallest `y`.
pub fn find_bad_cubes(
    corona: &CoronaDecomposition,
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    j: &AngleInterval,
) -> Vec<BadCube> {
    let j3 = j.dilate(3.0);
    let jh = j.dilate(0.5);
    let hull = (j3.halfwidth < 0.25).then_some((j3.center, j3.halfwidth));
    let index = ConeIndex::new(mu);
    let pts = mu.points();
    let found: Vec<Option<BadCube>> = lattice
        .cubes
        .par_iter()
        .map(|c| {
            let (lo, hi) = (lattice.rho * c.tall, c.tall);
            for &i in &c.members {
                let x = pts[i];
                let mut hit: Option<usize> = None;
                index.for_each_candidate(x, hull, hi, |k| {
                    let v = pts[k] - x;
                    if radial_ok(v.norm(), lo, hi)
                        && j3.contains_line(v)
                        && !jh.contains_line(v)
                        && hit.is_none_or(|h| k < h)
                    {
                        hit = Some(k);
                    }
                });
                if let Some(y) = hit {
                    let tree = corona.tree_of[c.id];
                    return Some(BadCube { tree, root: corona.trees[tree].root, cube: c.id, x: i, y });
                }
            }
            None
        })
        .collect();
    found.into_iter().flatten().collect()
}

/// Coordinate reflection placing `y` to the lower right of `x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Frame {
    pub sx: f64,
    pub sy: f64,
}

impl Frame {
    pub fn of(x: Point, y: Point) -> Option<Frame> {
        if x.x == y.x || x.y == y.y {
            return None;
        }
        Some(Frame { sx: if y.x > x.x { 1.0 } else { -1.0 }, sy: if x.y > y.y { 1.0 } else { -1.0 } })
    }

    /// The map is an involution.
    pub fn map(&self, p: Point) -> Point {
        Point::new(self.sx * p.x, self.sy * p.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum LeftistStatus {
    Found(i64),
    NotFound,
    /// Strips thinner than `4h`.
    Refused,
}

/// Leftist-rectangle search in frame coordinates (`x` upper left, `y` lower
/// right).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeftistTrace {
    pub x: Point,
    pub y: Point,
    pub n: usize,
    /// `ℓ(𝒢) = π₀(y) − π₀(x)`.
    pub width: f64,
    /// `𝖫(𝒢) = π₀^⊥(x) − π₀^⊥(y)`.
    pub height: f64,
    /// Leftmost point of each `𝒢_i`, `i = −N..=N`.
    pub z: Vec<Option<Point>>,
    pub status: LeftistStatus,
}

impl LeftistTrace {
    pub fn strip_height(&self) -> f64 {
        self.height / (2 * self.n + 1) as f64
    }

    pub fn leftmost(&self, i: i64) -> Option<Point> {
        let k = i + self.n as i64;
        if k < 0 || k as usize >= self.z.len() {
            return None;
        }
        self.z[k as usize]
    }

    /// Closed-strip membership of `p`: strips `i` whose band contains `p`.
    pub fn strips_of(&self, p: Point) -> Vec<i64> {
        strips_of(p, self.x, self.y, self.height, self.n)
    }

    /// `𝒢_i` for `−N ≤ i ≤ N` as `(lo, hi)` corners.
    pub fn strip_rect(&self, i: i64) -> (Point, Point) {
        let s = self.strip_height();
        (
            Point::new(self.x.x, self.y.y + (2 * i - 1) as f64 * s / 2.0),
            Point::new(self.y.x, self.y.y + (2 * i + 1) as f64 * s / 2.0),
        )
    }
}

fn strips_of(p: Point, x: Point, y: Point, height: f64, n: usize) -> Vec<i64> {
    if p.x < x.x - GEOM_TOL || p.x > y.x + GEOM_TOL || (p.y - y.y).abs() > height / 2.0 + GEOM_TOL {
        return Vec::new();
    }
    let s = height / (2 * n + 1) as f64;
    let t = (p.y - y.y) / s;
    let tol = GEOM_TOL / s;
    let n = n as i64;
    let i = t.round() as i64;
    (i - 1..=i + 1)
        .filter(|&k| k >= -n && k <= n)
        .filter(|&k| t >= (2 * k - 1) as f64 / 2.0 - tol && t <= (2 * k + 1) as f64 / 2.0 + tol)
        .collect()
}

/// Scans `0, 1, −1, 2, −2, …` for the first leftist `𝒢_i`, `|i| ≤ N − 1`.
/// `points` are in frame coordinates.
pub fn leftist_search(points: &[Point], x: Point, y: Point, n: usize, h: f64) -> LeftistTrace {
    let width = y.x - x.x;
    let height = x.y - y.y;
    let mut trace = LeftistTrace { x, y, n, width, height, z: vec![None; 2 * n + 1], status: LeftistStatus::Refused };
    if !(width > 0.0 && height > 0.0) || n == 0 || height / ((2 * n + 1) as f64) < 4.0 * h {
        return trace;
    }
    for &p in points {
        for i in strips_of(p, x, y, height, n) {
            let slot = &mut trace.z[(i + n as i64) as usize];
            let better = match slot {
                None => true,
                Some(z) => p.x < z.x || (p.x == z.x && p.y < z.y),
            };
            if better {
                *slot = Some(p);
            }
        }
    }
    let n_i = n as i64;
    let beats = |i: i64, j: i64, tr: &LeftistTrace| match (tr.leftmost(i), tr.leftmost(j)) {
        (Some(zi), Some(zj)) => zi.x <= zj.x,
        (Some(_), None) => true,
        _ => false,
    };
    trace.status = LeftistStatus::NotFound;
    for k in 0..n_i {
        for i in if k == 0 { vec![0] } else { vec![k, -k] } {
            if i.abs() > n_i - 1 {
                continue;
            }
            if trace.leftmost(i).is_some() && beats(i, i - 1, &trace) && beats(i, i + 1, &trace) {
                trace.status = LeftistStatus::Found(i);
                return trace;
            }
        }
    }
    trace
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "reason", rename_all = "snake_case")]
pub enum VerdictStatus {
    Pass,
    Fail(String),
    NotFound,
    Skipped(String),
    NotApplicable(String),
}

/// Outcome of the gap-extraction verifier on one Bad cube.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapVerdict {
    pub root: usize,
    pub cube: usize,
    pub level: i32,
    /// Witness pair, original coordinates.
    pub witness: [Point; 2],
    pub frame: Frame,
    pub leftist_index: Option<i64>,
    /// `z_i`, frame coordinates.
    pub z: Option<Point>,
    /// Gap `K`, original coordinates.
    pub gap: Option<(f64, f64)>,
    /// `𝒜` as `(lo, hi)` corners, frame coordinates.
    pub a_rect: Option<(Point, Point)>,
    pub checks: BTreeMap<String, bool>,
    pub measured: BTreeMap<String, f64>,
    pub status: VerdictStatus,
    #[serde(skip)]
    pub trace: Option<LeftistTrace>,
}

/// Fixed parameters of the gap-lemma verifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GapParams {
    pub a: f64,
    pub n: usize,
}

impl GapParams {
    /// `N = ⌈C′·M·C₀⌉`.
    pub fn new(a: f64, c_prime: f64, m: f64, c0: f64) -> Self {
        GapParams { a, n: (c_prime * m * c0).ceil().max(1.0) as usize }
    }
}

/// Runs the leftist search for a Bad cube and checks the gap conclusion.
pub fn verify_gap_lemma(
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    bad: &BadCube,
    params: &GapParams,
) -> GapVerdict {
    let pts = mu.points();
    let (x, y) = (pts[bad.x], pts[bad.y]);
    let cube = lattice.cube(bad.cube);
    let h = mu.spacing();
    let frame = Frame::of(x, y).unwrap_or(Frame { sx: 1.0, sy: 1.0 });
    let mut v = GapVerdict {
        root: bad.root,
        cube: bad.cube,
        level: cube.level,
        witness: [x, y],
        frame,
        leftist_index: None,
        z: None,
        gap: None,
        a_rect: None,
        checks: BTreeMap::new(),
        measured: BTreeMap::new(),
        status: VerdictStatus::Pass,
        trace: None,
    };
    if Frame::of(x, y).is_none() {
        v.status = VerdictStatus::NotApplicable("witness pair is axis aligned".into());
        return v;
    }
    if h > cube.side / (64.0 * params.a) {
        v.status = VerdictStatus::Skipped(format!("spacing {h:e} exceeds ℓ(Q)/(64A) = {:e}", cube.side / (64.0 * params.a)));
        return v;
    }
    let framed: Vec<Point> = pts.iter().map(|&p| frame.map(p)).collect();
    let trace = leftist_search(&framed, frame.map(x), frame.map(y), params.n, h);
    v.measured.insert("strip_height_over_h".into(), trace.strip_height() / h.max(f64::MIN_POSITIVE));
    match trace.status {
        LeftistStatus::Refused => {
            v.status = VerdictStatus::Skipped("strips thinner than 4h".into());
            v.trace = Some(trace);
            return v;
        }
        LeftistStatus::NotFound => {
            v.status = VerdictStatus::NotFound;
            v.trace = Some(trace);
            return v;
        }
        LeftistStatus::Found(i) => v.leftist_index = Some(i),
    }
    v.trace = Some(trace);
    let i = v.leftist_index.unwrap_or(0);
    let trace = v.trace.as_ref().expect("trace set");
    let z = trace.leftmost(i).expect("leftist strip is nonempty");
    v.z = Some(z);
    // int(ℬ) holds no sample point: consistency of the search itself.
    let s = trace.strip_height();
    let b_lo = Point::new(trace.x.x, trace.y.y + (2 * i - 3) as f64 * s / 2.0);
    let b_hi = Point::new(z.x, trace.y.y + (2 * i + 3) as f64 * s / 2.0);
    let b_clear = !framed.iter().any(|p| strictly_inside(*p, b_lo, b_hi));
    v.checks.insert("b_interior_empty".into(), b_clear);
    v.measured.insert("l_b_over_l_q".into(), (z.x - trace.x.x) / cube.side);
    conclude(&mut v, lattice, mu, params);
    v
}

fn strictly_inside(p: Point, lo: Point, hi: Point) -> bool {
    p.x > lo.x + GEOM_TOL && p.x < hi.x - GEOM_TOL && p.y > lo.y + GEOM_TOL && p.y < hi.y - GEOM_TOL
}

/// `𝒜` emptiness and the gap conclusion for a verdict whose `z_i` is set,
/// evaluated against `mu`.
fn conclude(v: &mut GapVerdict, lattice: &CubeLattice, mu: &DiscreteMeasure, params: &GapParams) {
    let Some(z) = v.z else { return };
    let a = params.a;
    let h = mu.spacing();
    let cube = lattice.cube(v.cube);
    let tall_r = lattice.cube(v.root).tall;
    let frame = v.frame;
    let a_lo = Point::new(z.x - cube.side / a, z.y - 2.0 * a * tall_r);
    let a_hi = Point::new(z.x, z.y + 2.0 * a * tall_r);
    v.a_rect = Some((a_lo, a_hi));
    let z_in_r = lattice.cube_rect(v.root).scaled(a).contains(frame.map(z));
    v.measured.insert("z_in_a_rect_r".into(), if z_in_r { 1.0 } else { 0.0 });
    let intruder = mu.points().iter().map(|&p| frame.map(p)).find(|p| strictly_inside(*p, a_lo, a_hi));
    v.checks.insert("a_interior_empty".into(), intruder.is_none());
    let gaps = find_gaps(lattice, mu, v.root, a).reflected(frame.sx);
    let k = gaps.containing(z.x - cube.side / a + h, z.x - h);
    v.checks.insert("gap_found".into(), k.is_some());
    if let Some(k) = k {
        let len = k.1 - k.0;
        v.gap = Some(if frame.sx > 0.0 { k } else { (-k.1, -k.0) });
        v.checks.insert("gap_length".into(), len >= cube.side / a - 2.0 * h - GEOM_TOL);
        let c = frame.sx * cube.center.x;
        let mid = 0.5 * (k.0 + k.1);
        let reach = 0.5 * a.powi(3) * len;
        let contained = c - cube.side / 2.0 >= mid - reach - GEOM_TOL && c + cube.side / 2.0 <= mid + reach + GEOM_TOL;
        v.checks.insert("a3_containment".into(), contained);
        v.measured.insert("k_over_l_q".into(), len / cube.side);
        v.measured.insert("k_in_family".into(), if len <= a * cube.side { 1.0 } else { 0.0 });
        v.measured.insert("right_end_offset_over_h".into(), (z.x - k.1) / h.max(f64::MIN_POSITIVE));
    }
    let failed: Vec<&str> = v.checks.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k.as_str()).collect();
    v.status = if failed.is_empty() { VerdictStatus::Pass } else { VerdictStatus::Fail(failed.join(",")) };
}

/// Re-evaluates the `𝒜` and gap checks of a passing verdict against another
/// sample, keeping its leftist trace.
pub fn reverify_frozen(v: &GapVerdict, lattice: &CubeLattice, mu: &DiscreteMeasure, params: &GapParams) -> GapVerdict {
    let mut out = v.clone();
    out.checks.retain(|k, _| k == "b_interior_empty");
    out.gap = None;
    conclude(&mut out, lattice, mu, params);
    out
}

/// A point strictly inside the verdict's `𝒜` at the height of `z`, in
/// original coordinates.
pub fn point_inside_a(v: &GapVerdict) -> Option<Point> {
    let (lo, hi) = v.a_rect?;
    let z = v.z?;
    let inner = Point::new(0.5 * (lo.x + hi.x), z.y);
    Some(v.frame.map(inner))
}

/// Runs the verifier on every Bad cube of a tree that passed the empty-cone
/// check; other trees give `NotApplicable`.
pub fn verify_all(
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    bad: &[BadCube],
    tree_ok: &[bool],
    params: &GapParams,
) -> Vec<GapVerdict> {
    bad.par_iter()
        .map(|b| {
            if tree_ok.get(b.tree).copied().unwrap_or(false) {
                verify_gap_lemma(lattice, mu, b, params)
            } else {
                let pts = mu.points();
                GapVerdict {
                    root: b.root,
                    cube: b.cube,
                    level: lattice.cube(b.cube).level,
                    witness: [pts[b.x], pts[b.y]],
                    frame: Frame::of(pts[b.x], pts[b.y]).unwrap_or(Frame { sx: 1.0, sy: 1.0 }),
                    leftist_index: None,
                    z: None,
                    gap: None,
                    a_rect: None,
                    checks: BTreeMap::new(),
                    measured: BTreeMap::new(),
                    status: VerdictStatus::NotApplicable("tree failed the empty-cone check".into()),
                    trace: None,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphReport {
    pub segment_direction: Direction,
    pub s: f64,
    pub g_t_measure: f64,
    pub g_measure: f64,
    pub theta: Direction,
    pub lip: f64,
    pub lip_bound: f64,
    pub density_sup: f64,
    /// `density_sup · s`.
    pub density_c: f64,
    pub n_points: usize,
}

/// Longest circular run of set cells, as `(first cell, length)`.
fn longest_run(set: &DirectionSet) -> Option<(usize, usize)> {
    let n = set.len();
    let bits: Vec<bool> = (0..n).map(|c| set.contains_cell(c)).collect();
    if !bits.iter().any(|&b| b) {
        return None;
    }
    if bits.iter().all(|&b| b) {
        return Some((0, n));
    }
    let start = (0..n).find(|&c| !bits[c]).unwrap_or(0) + 1;
    let mut best = (0, 0);
    let mut run = 0;
    for k in 0..n {
        let c = (start + k) % n;
        if bits[c] {
            run += 1;
            if run > best.1 {
                best = ((c + n + 1 - run) % n, run);
            }
        } else {
            run = 0;
        }
    }
    Some(best)
}

/// Graph of a parallel-segment set over `ℓ_θ^⊥` for `θ` at the centre of
/// the longest run of `G_T` minus windows of `±0.1s` around the segment
/// direction and its opposite.
pub fn extract_graph_parallel_segments(
    set: &PlanarSet,
    g_t: &DirectionSet,
    s: f64,
    h: f64,
    bin_width: f64,
) -> Result<GraphReport, GapError> {
    let mut dir = None;
    for p in set.primitives() {
        match *p {
            Primitive::Segment { a, b, .. } => {
                let d = Direction::of_vector(b - a).turns().rem_euclid(0.5);
                match dir {
                    None => dir = Some(d),
                    Some(d0) if (d - d0).abs() < 1e-9 || ((d - d0).abs() - 0.5).abs() < 1e-9 => {}
                    Some(_) => return Err(GapError::Precondition("segments are not parallel".into())),
                }
            }
            Primitive::Box { .. } => return Err(GapError::Precondition("set contains a box".into())),
        }
    }
    let theta0 = Direction::new(dir.ok_or_else(|| GapError::Precondition("empty set".into()))?);
    let g_t_measure = g_t.measure();
    if g_t.is_empty() || g_t_measure < s {
        return Err(GapError::Precondition(format!("ℋ(G_T) = {g_t_measure} is below s = {s}")));
    }
    let mut g = g_t.clone();
    let n = g.len();
    let cell = 1.0 / n as f64;
    for centre in [theta0, theta0.rotate(0.5)] {
        for c in 0..n {
            let mid = Direction::new((c as f64 + 0.5) * cell);
            if mid.distance(centre) < 0.1 * s + cell / 2.0 {
                g.set_cell(c, false);
            }
        }
    }
    let (first, len) =
        longest_run(&g).ok_or_else(|| GapError::Precondition("G_T is exhausted by the windows".into()))?;
    let theta = Direction::new((first as f64 + len as f64 / 2.0) * cell);
    let mu = DiscreteMeasure::sample(set, h)?;
    let (e, e_perp) = (theta.unit(), theta.perp().unit());
    let pts = mu.points();
    let worst = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut best = (0.0f64, i, i);
            for k in i + 1..pts.len() {
                let d = pts[k] - pts[i];
                let along = d.dot(e).abs();
                let across = d.dot(e_perp).abs();
                let lip = if across > 0.0 { along / across } else if along > 0.0 { f64::INFINITY } else { 0.0 };
                if lip > best.0 {
                    best = (lip, i, k);
                }
            }
            best
        })
        .reduce(|| (0.0, 0, 0), |a, b| if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a });
    let lip_bound = 4.0 / s;
    if worst.0 > lip_bound {
        return Err(GapError::NotAGraph { a: pts[worst.1], b: pts[worst.2], lip: worst.0 });
    }
    let density = pushforward_density(&mu, theta.perp(), bin_width)?;
    Ok(GraphReport {
        segment_direction: theta0,
        s,
        g_t_measure,
        g_measure: g.measure(),
        theta,
        lip: worst.0,
        lip_bound,
        density_sup: density.sup_norm,
        density_c: density.sup_norm * s,
        n_points: mu.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::build_corona;
    use crate::generators::parallel_segments_simple;
    use crate::lattice::build_lattice;

    #[test]
    fn complement_two_segments() {
        let mut v: Vec<f64> = (0..=40).map(|i| i as f64 * 0.01).chain((60..=100).map(|i| i as f64 * 0.01)).collect();
        let g = complement_gaps(&mut v, (0.0, 1.0), 0.01);
        assert_eq!(g.len(), 1);
        assert!((g[0].0 - 0.41).abs() < 1e-12 && (g[0].1 - 0.59).abs() < 1e-12);
        let mut dense: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        assert!(complement_gaps(&mut dense, (0.0, 1.0), 0.01).is_empty());
    }

    #[test]
    fn gap_filter() {
        let gs = GapSet { root: 0, u: (0.0, 1.0), thickening: 0.0, gaps: vec![(0.1, 0.5), (0.6, 0.61)] };
        assert_eq!(gs.filter(1e-4, 2.0), vec![]);
        assert_eq!(gs.filter(0.01, 2.0), vec![(0.6, 0.61)]);
        assert_eq!(gs.reflected(-1.0).gaps, vec![(-0.61, -0.6), (-0.5, -0.1)]);
    }

    #[test]
    fn leftist_only_centre_strip() {
        let x = Point::new(0.0, 1.0);
        let y = Point::new(1.0, 0.0);
        let pts = vec![Point::new(0.5, 0.0), Point::new(0.8, 0.01), y];
        let t = leftist_search(&pts, x, y, 3, 1e-4);
        assert_eq!(t.status, LeftistStatus::Found(0));
        assert_eq!(t.leftmost(0), Some(Point::new(0.5, 0.0)));
    }

    #[test]
    fn leftist_staircase_not_found() {
        let n = 3;
        let x = Point::new(0.0, 1.0);
        let y = Point::new(1.0, 0.0);
        let s = 1.0 / 7.0;
        let mut pts = vec![y];
        for i in 1..=n {
            pts.push(Point::new(0.9 - 0.2 * i as f64, i as f64 * s));
        }
        let t = leftist_search(&pts, x, y, n, 1e-4);
        assert_eq!(t.status, LeftistStatus::NotFound);
        assert_eq!(leftist_search(&pts, x, y, n, 0.1).status, LeftistStatus::Refused);
    }

    fn two_step() -> (DiscreteMeasure, CubeLattice, AngleInterval) {
        let s = parallel_segments_simple(Direction::new(0.0), &[0.0, 0.3], &[0.3, 0.3]).unwrap();
        let s = s.map_points(|p| if p.y > 0.1 { Point::new(p.x + 0.45, p.y) } else { p }).unwrap();
        let mu = DiscreteMeasure::sample(&s, 1e-4).unwrap();
        let l = build_lattice(&mu, 0.125, 0.5, 2).unwrap();
        (mu, l, AngleInterval::new(Direction::new(0.25), 1.0 / 16.0).unwrap())
    }

    #[test]
    fn two_step_configuration() {
        let (mu, l, j) = two_step();
        let corona = build_corona(&l, &vec![0.0; l.cubes.len()], j.measure(), 1.0, 4.0).unwrap();
        let ec = check_empty_cones(&corona, &l, &mu, &j, 16.0);
        assert!(ec.all_pass(), "{:?}", ec.witnesses.first());
        let bad = find_bad_cubes(&corona, &l, &mu, &j);
        assert!(!bad.is_empty());
        let params = GapParams { a: 16.0, n: 4 };
        let mut passed = 0;
        for v in verify_all(&l, &mu, &bad, &ec.tree_ok, &params) {
            match &v.status {
                VerdictStatus::Pass => {
                    let (a, b) = v.gap.unwrap();
                    assert!(a >= 0.29 && b <= 0.46, "gap {a} {b}");
                    passed += 1;
                }
                VerdictStatus::Skipped(_) => {}
                other => panic!("{other:?}"),
            }
        }
        assert!(passed > 0);
    }

    #[test]
    fn vertical_pair_breaks_empty_cones() {
        let (mu, l, j) = two_step();
        let mut pts = mu.points().to_vec();
        pts.push(Point::new(0.1, 0.5));
        let n = pts.len();
        let mu2 = DiscreteMeasure::new(pts, vec![1.0 / n as f64; n], mu.spacing()).unwrap();
        let l2 = build_lattice(&mu2, l.aspect, l.rho, 2).unwrap();
        let corona = build_corona(&l2, &vec![0.0; l2.cubes.len()], j.measure(), 1.0, 4.0).unwrap();
        let ec = check_empty_cones(&corona, &l2, &mu2, &j, 4.0);
        assert!(!ec.all_pass());
    }

    #[test]
    fn graph_single_segment_eighth_turn() {
        let s = parallel_segments_simple(Direction::new(0.0), &[0.0], &[1.0]).unwrap();
        let g = DirectionSet::from_cells(6, 4..12).unwrap().symmetrized();
        let r = extract_graph_parallel_segments(&s, &g, 0.25, 1e-2, 1e-2).unwrap();
        assert!((r.theta.turns() - 0.125).abs() < 1e-12);
        assert!((r.lip - 1.0).abs() < 1e-9);
        assert!(extract_graph_parallel_segments(&s, &DirectionSet::empty(6).unwrap(), 0.25, 1e-2, 1e-2).is_err());
    }
}
