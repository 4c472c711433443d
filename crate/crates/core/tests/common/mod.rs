//! Reference computations written directly from the definitions, sharing
//! nothing with the library beyond its data types.

#![allow(dead_code)]

use std::f64::consts::TAU;

use favlab_core::directions::{DirectionSet, DyadicInterval};
use favlab_core::energy::CoronaDecomposition;
use favlab_core::gaps::GapVerdict;
use favlab_core::geometry::Point;
use favlab_core::lattice::CubeLattice;
use favlab_core::sets::DiscreteMeasure;

pub const TOL: f64 = 1e-12;

/// `max(|dx|, aspect·|dy|)`.
pub fn aniso(p: Point, q: Point, aspect: f64) -> f64 {
    let dx = (p.x - q.x).abs();
    let dy = aspect * (p.y - q.y).abs();
    if dx > dy { dx } else { dy }
}

/// Angle of the line spanned by `v`, in turns, reduced to `[0, 1/2)`.
pub fn line_turns(v: Point) -> f64 {
    let t = v.y.atan2(v.x) / TAU;
    let t = t - t.floor();
    if t >= 0.5 { t - 0.5 } else { t }
}

/// Whether some cell of `g` contains the direction of `v` or of `−v`.
pub fn set_has_line(g: &DirectionSet, v: Point) -> bool {
    let n = g.len();
    let t = line_turns(v);
    let c = ((t * n as f64).floor() as usize).min(n / 2 - 1);
    g.contains_cell(c) || g.contains_cell(c + n / 2)
}

/// Whether the line of `v` lies within `halfwidth` turns of `center`.
pub fn arc_has_line(center: f64, halfwidth: f64, v: Point) -> bool {
    if halfwidth >= 0.25 {
        return true;
    }
    let t = (line_turns(v) - center).rem_euclid(0.5);
    t.min(0.5 - t) <= halfwidth + TOL
}

/// Nodes and step of the log-midpoint rule on `[a, b]`.
pub fn log_nodes(a: f64, b: f64, q: usize) -> (Vec<f64>, f64) {
    let decades = (b / a).log10();
    let n = q.max((q as f64 * decades).ceil() as usize);
    let du = (b / a).ln() / n as f64;
    let ratio = b / a;
    let nodes = (0..n).map(|j| a * ratio.powf((j as f64 + 0.5) / n as f64)).collect();
    (nodes, du)
}

/// `Σ_j du · μ(partners within r_j)/r_j` by direct summation.
pub fn cone_integral(nodes: &[f64], du: f64, partners: &[(f64, f64)]) -> f64 {
    let mut acc = 0.0;
    for &r in nodes {
        let mass: f64 = partners.iter().filter(|p| p.0 <= r + TOL).map(|p| p.1).sum();
        acc += du * mass / r;
    }
    acc
}

#[derive(Debug, Default)]
pub struct EnergyOracle {
    pub e_g: Vec<f64>,
    pub e_j: Vec<f64>,
    pub e_j_int: Vec<f64>,
    pub e_j_ext: Vec<f64>,
    pub e_j_ext_tilde: Vec<f64>,
}

/// `E_G` and the `E_J` family of every cube, point by point.
pub fn energies(
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    g: &DirectionSet,
    j_center: f64,
    j_halfwidth: f64,
    a: f64,
    q: usize,
) -> EnergyOracle {
    let pts = mu.points();
    let w = mu.weights();
    let n = pts.len();
    let exclude = mu.spacing();
    let depth = lattice.levels.len();
    let talls: Vec<f64> = (0..depth).map(|t| lattice.cubes[lattice.levels[t][0]].tall).collect();
    let rho = lattice.rho;

    // per_point[t][i] = [G, J, J int, J ext, tilde]
    let mut per_point = vec![vec![[0.0f64; 5]; n]; depth];
    for i in 0..n {
        let (mut pg, mut pall, mut pint, mut pext) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for k in 0..n {
            let v = pts[k] - pts[i];
            let d = (v.x * v.x + v.y * v.y).sqrt();
            if d <= exclude {
                continue;
            }
            if set_has_line(g, v) {
                pg.push((d, w[k]));
            }
            if arc_has_line(j_center, 3.0 * j_halfwidth, v) {
                pall.push((d, w[k]));
                if arc_has_line(j_center, 0.5 * j_halfwidth, v) {
                    pint.push((d, w[k]));
                } else {
                    pext.push((d, w[k]));
                }
            }
        }
        for t in 0..depth {
            let l = talls[t];
            let (gn, gdu) = log_nodes(l / a, a * a * a * l, q);
            let (jn, jdu) = log_nodes(rho * l, l, q);
            let tilde: f64 = pext.iter().filter(|p| p.0 > rho * l + TOL && p.0 <= l + TOL).map(|p| p.1).sum();
            per_point[t][i] = [
                cone_integral(&gn, gdu, &pg),
                cone_integral(&jn, jdu, &pall),
                cone_integral(&jn, jdu, &pint),
                cone_integral(&jn, jdu, &pext),
                tilde / l,
            ];
        }
    }

    let mut out = EnergyOracle::default();
    for (id, cube) in lattice.cubes.iter().enumerate() {
        let t = (cube.level - lattice.top_level) as usize;
        let mut eg = 0.0;
        for i in 0..n {
            let near_x = (pts[i].x - cube.center.x).abs() <= a * cube.side + TOL;
            let near_y = (pts[i].y - cube.center.y).abs() <= a * cube.tall + TOL;
            if near_x && near_y {
                eg += w[i] * per_point[t][i][0];
            }
        }
        out.e_g.push(eg / cube.mass);
        let mut fam = [0.0; 4];
        for &m in &cube.members {
            for (f, v) in fam.iter_mut().zip(&per_point[t][m][1..]) {
                *f += w[m] * v;
            }
        }
        let _ = id;
        out.e_j.push(fam[0] / cube.mass);
        out.e_j_int.push(fam[1] / cube.mass);
        out.e_j_ext.push(fam[2] / cube.mass);
        out.e_j_ext_tilde.push(fam[3] / cube.mass);
    }
    out
}

/// Largest relative difference between two equally long vectors.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 { 0.0 } else { (x - y).abs() / scale }
        })
        .fold(0.0, f64::max)
}

/// `(c_in, C_out)` by scanning every pair: `C_out` is the largest
/// `d(member, center)/ρᵏ`, `c_in` the smallest `d(outsider, center)/ρᵏ`
/// capped at 2.
pub fn sandwich(lattice: &CubeLattice, mu: &DiscreteMeasure) -> (f64, f64) {
    let pts = mu.points();
    let mut c_in = 2.0f64;
    let mut c_out = 0.0f64;
    for (t, ids) in lattice.levels.iter().enumerate() {
        let r = lattice.rho.powi(lattice.top_level + t as i32);
        for &id in ids {
            let cube = &lattice.cubes[id];
            let centre = pts[cube.center_index];
            let mut inside = vec![false; pts.len()];
            for &m in &cube.members {
                inside[m] = true;
                c_out = c_out.max(aniso(pts[m], centre, lattice.aspect) / r);
            }
            for (i, p) in pts.iter().enumerate() {
                if !inside[i] {
                    c_in = c_in.min(aniso(*p, centre, lattice.aspect) / r);
                }
            }
        }
    }
    (c_in, c_out)
}

/// Every level partitions the sample and every cube is contained in its
/// parent.
pub fn lattice_structure(lattice: &CubeLattice, n_points: usize) -> Result<(), String> {
    for (t, ids) in lattice.levels.iter().enumerate() {
        let mut hits = vec![0usize; n_points];
        for &id in ids {
            for &m in &lattice.cubes[id].members {
                hits[m] += 1;
            }
        }
        if let Some(p) = hits.iter().position(|&h| h != 1) {
            return Err(format!("level {t}: point {p} covered {} times", hits[p]));
        }
    }
    for cube in &lattice.cubes {
        if let Some(p) = cube.parent {
            let parent = &lattice.cubes[p].members;
            if let Some(m) = cube.members.iter().find(|m| parent.binary_search(m).is_err()) {
                return Err(format!("cube {}: member {m} outside parent {p}", cube.id));
            }
        }
    }
    Ok(())
}

/// Every cube in exactly one tree, stopping cubes exactly where the running
/// sum from the root reaches the threshold, and the two stopping-time sums.
pub fn corona(corona: &CoronaDecomposition, lattice: &CubeLattice, e_g: &[f64]) -> Result<(), String> {
    let n = lattice.cubes.len();
    let mut owner = vec![None; n];
    for (t, tree) in corona.trees.iter().enumerate() {
        for &c in &tree.cubes {
            if owner[c].replace(t).is_some() {
                return Err(format!("cube {c} in two trees"));
            }
        }
    }
    if let Some(c) = owner.iter().position(Option::is_none) {
        return Err(format!("cube {c} in no tree"));
    }
    for tree in &corona.trees {
        let mut small = 0.0;
        let mut total = 0.0;
        let mut stopped_mass = 0.0;
        for &c in &tree.cubes {
            let mut sum = 0.0;
            let mut cur = c;
            loop {
                sum += e_g[cur];
                if cur == tree.root {
                    break;
                }
                cur = lattice.cubes[cur].parent.ok_or_else(|| format!("cube {c} does not reach root {}", tree.root))?;
            }
            let stops = sum >= corona.threshold;
            if stops != tree.bce.contains(&c) {
                return Err(format!("cube {c}: running sum {sum} vs threshold {}", corona.threshold));
            }
            let mass = lattice.cubes[c].mass;
            total += e_g[c] * mass;
            if stops {
                stopped_mass += mass;
            } else {
                small += e_g[c] * mass;
            }
        }
        let root_mass = lattice.cubes[tree.root].mass;
        let slack = 1.0 + 1e-10;
        if small > corona.threshold * root_mass * slack {
            return Err(format!("tree {}: small-energy sum {small} exceeds δℋ(J)μ(R)", tree.root));
        }
        if corona.threshold * stopped_mass > total * slack {
            return Err(format!("tree {}: stopping mass exceeds the tree energy", tree.root));
        }
    }
    Ok(())
}

/// Set cells of a bitset as booleans.
pub fn bits(g: &DirectionSet) -> Vec<bool> {
    (0..g.len()).map(|c| g.contains_cell(c)).collect()
}

/// Set cells in the dyadic interval `(d, i)`.
pub fn count(bits: &[bool], depth: u32, d: u32, i: u64) -> u64 {
    let shift = depth - d;
    let lo = (i << shift) as usize;
    let hi = ((i + 1) << shift) as usize;
    bits[lo..hi].iter().filter(|b| **b).count() as u64
}

/// Every dyadic interval inside `j`, coarsest first.
pub fn intervals_inside(j: DyadicInterval, depth: u32) -> Vec<DyadicInterval> {
    let mut out = Vec::new();
    for d in j.depth..=depth {
        let shift = d - j.depth;
        for i in (j.index << shift)..((j.index + 1) << shift) {
            out.push(DyadicInterval { depth: d, index: i });
        }
    }
    out
}

fn contains(outer: DyadicInterval, inner: DyadicInterval) -> bool {
    outer.depth <= inner.depth && (inner.index >> (inner.depth - outer.depth)) == outer.index
}

/// `64·count ≥ (64 − k)·size`: density at least `1 − k/64`.
pub fn dense(count: u64, size: u64, k: u64) -> bool {
    64 * count >= (64 - k) * size
}

/// Maximal intervals inside `j` with density at least `1 − k/64`.
pub fn dense_family(bits: &[bool], depth: u32, j: DyadicInterval, k: u64) -> Vec<DyadicInterval> {
    let all = intervals_inside(j, depth);
    let is_dense = |i: &DyadicInterval| {
        let c = count(bits, depth, i.depth, i.index);
        c > 0 && dense(c, 1 << (depth - i.depth), k)
    };
    let dense_set: Vec<DyadicInterval> = all.iter().copied().filter(is_dense).collect();
    let mut out: Vec<DyadicInterval> = dense_set
        .iter()
        .copied()
        .filter(|i| !dense_set.iter().any(|o| o != i && contains(*o, *i)))
        .collect();
    out.sort();
    out
}

/// Maximal elements among the parents of `family`.
pub fn star(family: &[DyadicInterval]) -> Vec<DyadicInterval> {
    let parents: Vec<DyadicInterval> =
        family.iter().map(|i| DyadicInterval { depth: i.depth - 1, index: i.index / 2 }).collect();
    let mut out: Vec<DyadicInterval> =
        parents.iter().copied().filter(|p| !parents.iter().any(|o| o != p && contains(*o, *p))).collect();
    out.sort();
    out.dedup();
    out
}

/// Maximal intervals inside `j` with no set cell.
pub fn empty_family(bits: &[bool], depth: u32, j: DyadicInterval) -> Vec<DyadicInterval> {
    let all = intervals_inside(j, depth);
    let empty: Vec<DyadicInterval> =
        all.iter().copied().filter(|i| count(bits, depth, i.depth, i.index) == 0).collect();
    let mut out: Vec<DyadicInterval> =
        empty.iter().copied().filter(|i| !empty.iter().any(|o| o != i && contains(*o, *i))).collect();
    out.sort();
    out
}

/// Cells of `bits` together with every cell of `extra`.
pub fn fill(bits: &[bool], depth: u32, extra: &[DyadicInterval]) -> Vec<bool> {
    let mut out = bits.to_vec();
    for i in extra {
        let shift = depth - i.depth;
        for c in (i.index << shift)..((i.index + 1) << shift) {
            out[c as usize] = true;
        }
    }
    out
}

/// Smallest `K` with `(s/4)(1+ε)ᴷ ≥ 1 − ε`, by repeated multiplication.
pub fn steps_needed(eps: f64, s: f64) -> u64 {
    let mut m = s / 4.0;
    let mut k = 0;
    while m < 1.0 - eps {
        m *= 1.0 + eps;
        k += 1;
    }
    k
}

/// Re-derives the conclusions of a passing verdict from the sample: `𝒜` from
/// its definition and empty, no point of `A𝒭_R` projecting into the
/// thickened `K`, the length of `K`, `π₀(𝒭_Q) ⊆ A³K`, and no point of the
/// three strips around the leftist one to the left of `z`.
pub fn gap_conclusion(v: &GapVerdict, lattice: &CubeLattice, mu: &DiscreteMeasure, a: f64) -> Result<(), String> {
    let z = v.z.ok_or("no z")?;
    let (lo, hi) = v.a_rect.ok_or("no 𝒜")?;
    let (k0, k1) = v.gap.ok_or("no K")?;
    let cube = &lattice.cubes[v.cube];
    let root = &lattice.cubes[v.root];
    let h = mu.spacing();
    let f = |p: Point| Point::new(v.frame.sx * p.x, v.frame.sy * p.y);

    let want_lo = Point::new(z.x - cube.side / a, z.y - 2.0 * a * root.tall);
    let want_hi = Point::new(z.x, z.y + 2.0 * a * root.tall);
    if want_lo.dist(lo) > 1e-9 || want_hi.dist(hi) > 1e-9 {
        return Err(format!("𝒜 = {lo:?}..{hi:?}, expected {want_lo:?}..{want_hi:?}"));
    }
    for p in mu.points() {
        let q = f(*p);
        if q.x > lo.x + TOL && q.x < hi.x - TOL && q.y > lo.y + TOL && q.y < hi.y - TOL {
            return Err(format!("sample point {p:?} inside 𝒜"));
        }
    }

    let half_x = a * root.side / 2.0;
    let half_y = a * root.tall / 2.0;
    if k0 < root.center.x - half_x - 1e-9 || k1 > root.center.x + half_x + 1e-9 {
        return Err(format!("K = ({k0}, {k1}) leaves U(R)"));
    }
    for p in mu.points() {
        let in_r = (p.x - root.center.x).abs() <= half_x + TOL && (p.y - root.center.y).abs() <= half_y + TOL;
        if in_r && p.x > k0 - h + 1e-9 && p.x < k1 + h - 1e-9 {
            return Err(format!("sample point {p:?} of A𝒭_R projects into K = ({k0}, {k1})"));
        }
    }
    let len = k1 - k0;
    if len < cube.side / a - 2.0 * h - 1e-9 {
        return Err(format!("|K| = {len} < ℓ(Q)/A − 2h"));
    }
    let mid = 0.5 * (k0 + k1);
    let reach = 0.5 * a * a * a * len;
    if cube.center.x - cube.side / 2.0 < mid - reach - 1e-9 || cube.center.x + cube.side / 2.0 > mid + reach + 1e-9 {
        return Err("π₀(𝒭_Q) ⊄ A³K".into());
    }

    let trace = v.trace.as_ref().ok_or("no trace")?;
    let i = v.leftist_index.ok_or("no leftist index")?;
    let x = f(v.witness[0]);
    let y = f(v.witness[1]);
    let s = (x.y - y.y) / (2 * trace.n + 1) as f64;
    let (b_lo, b_hi) = (y.y + (2 * i - 3) as f64 * s / 2.0, y.y + (2 * i + 3) as f64 * s / 2.0);
    for p in mu.points() {
        let q = f(*p);
        if q.x >= x.x - TOL && q.x <= y.x + TOL && q.y >= b_lo + TOL && q.y <= b_hi - TOL && q.x < z.x - TOL {
            return Err(format!("sample point {p:?} left of z in the strips around {i}"));
        }
    }
    Ok(())
}

/// Exact Lipschitz constant of a union of segments as a graph over the
/// line perpendicular to `theta`: within a segment the ratio is fixed, and
/// across two segments the ratio of linear forms peaks at endpoints.
pub fn segment_graph_lip(segments: &[(Point, Point)], theta: f64) -> f64 {
    let e = Point::new((TAU * theta).cos(), (TAU * theta).sin());
    let e_perp = Point::new(-e.y, e.x);
    let ratio = |d: Point| {
        let along = (d.x * e.x + d.y * e.y).abs();
        let across = (d.x * e_perp.x + d.y * e_perp.y).abs();
        if across > 0.0 { along / across } else { f64::INFINITY }
    };
    let mut best = 0.0f64;
    for (i, &(a, b)) in segments.iter().enumerate() {
        best = best.max(ratio(b - a));
        for &(c, d) in &segments[i + 1..] {
            for p in [a, b] {
                for q in [c, d] {
                    best = best.max(ratio(q - p));
                }
            }
        }
    }
    best
}
