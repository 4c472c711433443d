//! Generalized dyadic cubes on a sample under the anisotropic metric, built
//! from nested maximal nets.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{aniso_metric, AnisoRect, Direction, Point, GEOM_TOL};
use crate::sets::{lex_cmp, pushforward_density, DiscreteMeasure, MeasureError};

#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("aspect must lie in (0, 1], got {0}")]
    Aspect(f64),
    #[error("rho must lie in (0, 1/2], got {0}")]
    Rho(f64),
    #[error("sample is empty")]
    EmptySample,
    #[error("need at least one level")]
    NoLevels,
    #[error("ball sandwich violated at cube {cube}: c_in = {c_in}, C_out = {c_out}")]
    Sandwich { cube: usize, c_in: f64, c_out: f64 },
    #[error("no direction near 1/4 has a verified density bound {0}")]
    HypothesisUnverified(f64),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DyadicCube {
    pub level: i32,
    pub id: usize,
    pub center: Point,
    /// Sample index of the center.
    pub center_index: usize,
    /// Sample indices, ascending.
    pub members: Vec<usize>,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// `ℓ(Q) = 4ρᵏ`.
    pub side: f64,
    /// `𝖫(Q) = ℓ(Q)/aspect`.
    pub tall: f64,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CubeLattice {
    pub aspect: f64,
    pub rho: f64,
    pub top_level: i32,
    /// Cube ids per level, coarsest first.
    pub levels: Vec<Vec<usize>>,
    pub cubes: Vec<DyadicCube>,
    /// `cube_of[t][p]`: cube of point `p` at level index `t`.
    pub cube_of: Vec<Vec<usize>>,
    /// Largest `c` with every sample point within `c·ρᵏ` of a center in its
    /// cube, capped at 2.
    pub c_in: f64,
    /// Smallest `C` with every member within `C·ρᵏ` of its center.
    pub c_out: f64,
}

/// Largest `k` with `4ρᵏ/aspect ≥ 1`.
pub fn top_level(aspect: f64, rho: f64) -> i32 {
    let mut k = ((aspect / 4.0).ln() / rho.ln()).floor() as i32;
    while 4.0 * rho.powi(k + 1) / aspect >= 1.0 - GEOM_TOL {
        k += 1;
    }
    while 4.0 * rho.powi(k) / aspect < 1.0 - GEOM_TOL {
        k -= 1;
    }
    k
}

pub fn build_lattice(mu: &DiscreteMeasure, aspect: f64, rho: f64, depth: usize) -> Result<CubeLattice, LatticeError> {
    build_lattice_from(mu, aspect, rho, top_level(aspect, rho), depth)
}

type Grid = HashMap<(i64, i64), Vec<usize>>;

fn key(p: Point, r: f64) -> (i64, i64) {
    ((p.x / r).floor() as i64, (p.y / r).floor() as i64)
}

fn neighbours(grid: &Grid, k: (i64, i64), reach: i64) -> impl Iterator<Item = usize> + '_ {
    (-reach..=reach)
        .flat_map(move |dy| (-reach..=reach).map(move |dx| (k.0 + dx, k.1 + dy)))
        .filter_map(|c| grid.get(&c))
        .flatten()
        .copied()
}

/// Levels `top, …, top + depth − 1`.
pub fn build_lattice_from(
    mu: &DiscreteMeasure,
    aspect: f64,
    rho: f64,
    top: i32,
    depth: usize,
) -> Result<CubeLattice, LatticeError> {
    if !(aspect > 0.0 && aspect <= 1.0) {
        return Err(LatticeError::Aspect(aspect));
    }
    if !(rho > 0.0 && rho <= 0.5) {
        return Err(LatticeError::Rho(rho));
    }
    if mu.is_empty() {
        return Err(LatticeError::EmptySample);
    }
    if depth == 0 {
        return Err(LatticeError::NoLevels);
    }
    let pts = mu.points();
    // Coordinates in which the metric is the sup norm.
    let q: Vec<Point> = pts.iter().map(|p| Point::new(p.x, aspect * p.y)).collect();
    let dist = |i: usize, j: usize| aniso_metric(pts[i], pts[j], aspect);
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(pts[a], pts[b]).then(a.cmp(&b)));

    let radii: Vec<f64> = (0..depth).map(|t| rho.powi(top + t as i32)).collect();
    let mut nets: Vec<Vec<usize>> = Vec::with_capacity(depth);
    let mut grids: Vec<Grid> = Vec::with_capacity(depth);
    // parent_pos[t][j]: position in nets[t-1] of the parent of nets[t][j].
    let mut parent_pos: Vec<Vec<usize>> = Vec::with_capacity(depth);
    for t in 0..depth {
        let r = radii[t];
        let mut net: Vec<usize> = if t == 0 { Vec::new() } else { nets[t - 1].clone() };
        let mut grid: Grid = HashMap::new();
        for (pos, &c) in net.iter().enumerate() {
            grid.entry(key(q[c], r)).or_default().push(pos);
        }
        for &i in &order {
            let k = key(q[i], r);
            if neighbours(&grid, k, 1).all(|pos| dist(i, net[pos]) >= r - GEOM_TOL) {
                grid.entry(k).or_default().push(net.len());
                net.push(i);
            }
        }
        let parents = if t == 0 {
            Vec::new()
        } else {
            let prev = &nets[t - 1];
            (0..net.len())
                .map(|j| if j < prev.len() { j } else { nearest(&grids[t - 1], prev, q[net[j]], radii[t - 1], |c| dist(net[j], c)) })
                .collect()
        };
        nets.push(net);
        grids.push(grid);
        parent_pos.push(parents);
    }

    let deepest = depth - 1;
    let mut pos_of: Vec<Vec<usize>> = vec![vec![0; pts.len()]; depth];
    for i in 0..pts.len() {
        pos_of[deepest][i] = nearest(&grids[deepest], &nets[deepest], q[i], radii[deepest], |c| dist(i, c));
        for t in (1..depth).rev() {
            pos_of[t - 1][i] = parent_pos[t][pos_of[t][i]];
        }
    }

    let mut offsets = Vec::with_capacity(depth);
    let mut total = 0;
    for net in &nets {
        offsets.push(total);
        total += net.len();
    }
    let mut cubes: Vec<DyadicCube> = Vec::with_capacity(total);
    let mut levels: Vec<Vec<usize>> = Vec::with_capacity(depth);
    for (t, net) in nets.iter().enumerate() {
        let k = top + t as i32;
        let side = 4.0 * rho.powi(k);
        levels.push((offsets[t]..offsets[t] + net.len()).collect());
        for (j, &c) in net.iter().enumerate() {
            cubes.push(DyadicCube {
                level: k,
                id: offsets[t] + j,
                center: pts[c],
                center_index: c,
                members: Vec::new(),
                parent: (t > 0).then(|| offsets[t - 1] + parent_pos[t][j]),
                children: Vec::new(),
                side,
                tall: side / aspect,
                mass: 0.0,
            });
        }
    }
    for id in 0..cubes.len() {
        if let Some(p) = cubes[id].parent {
            cubes[p].children.push(id);
        }
    }
    let cube_of: Vec<Vec<usize>> =
        (0..depth).map(|t| pos_of[t].iter().map(|&pos: &usize| offsets[t] + pos).collect()).collect();
    for t in 0..depth {
        for i in 0..pts.len() {
            let c = cube_of[t][i];
            cubes[c].members.push(i);
            cubes[c].mass += mu.weights()[i];
        }
    }

    let mut c_out = 0.0f64;
    let mut c_in = 2.0f64;
    for t in 0..depth {
        let r = radii[t];
        let mut pgrid: Grid = HashMap::new();
        for i in 0..pts.len() {
            pgrid.entry(key(q[i], r)).or_default().push(i);
        }
        for &id in &levels[t] {
            let cube = &cubes[id];
            for &m in &cube.members {
                c_out = c_out.max(dist(m, cube.center_index) / r);
            }
            for i in neighbours(&pgrid, key(q[cube.center_index], r), 2) {
                if cube_of[t][i] != id {
                    c_in = c_in.min(dist(i, cube.center_index) / r);
                }
            }
        }
    }
    if !(c_in > 0.0) || (rho <= 1e-3 + 1e-15 && (c_in < 0.4 || c_out > 2.0)) {
        return Err(LatticeError::Sandwich { cube: 0, c_in, c_out });
    }
    Ok(CubeLattice { aspect, rho, top_level: top, levels, cubes, cube_of, c_in, c_out })
}

fn nearest(grid: &Grid, net: &[usize], p: Point, r: f64, dist: impl Fn(usize) -> f64) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for pos in neighbours(grid, key(p, r), 1) {
        let d = dist(net[pos]);
        best = match best {
            Some((bd, bp)) if bd < d || (bd == d && bp < pos) => Some((bd, bp)),
            _ => Some((d, pos)),
        };
    }
    match best {
        Some((_, pos)) => pos,
        // Unreachable for a maximal net; fall back to a full scan.
        None => (0..net.len()).min_by(|&a, &b| dist(net[a]).total_cmp(&dist(net[b])).then(a.cmp(&b))).unwrap_or(0),
    }
}

impl CubeLattice {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn cube(&self, id: usize) -> &DyadicCube {
        &self.cubes[id]
    }

    /// Level index `t` (0 = top) of a cube.
    pub fn level_index(&self, id: usize) -> usize {
        (self.cubes[id].level - self.top_level) as usize
    }

    /// `𝒭_Q = 𝒭(x_Q, ℓ(Q))`.
    pub fn cube_rect(&self, id: usize) -> AnisoRect {
        let c = &self.cubes[id];
        AnisoRect::standard(c.center, c.side, self.aspect)
    }

    /// `𝒭(Q) = 0.1·𝒭_Q`.
    pub fn small_rect(&self, id: usize) -> AnisoRect {
        self.cube_rect(id).scaled(0.1)
    }

    /// All cubes in the subtree of `id`, preorder.
    pub fn descendants(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(c) = stack.pop() {
            out.push(c);
            stack.extend(self.cubes[c].children.iter().rev());
        }
        out
    }

    /// Cube `id` contains cube `other`.
    pub fn is_ancestor(&self, id: usize, mut other: usize) -> bool {
        loop {
            if other == id {
                return true;
            }
            match self.cubes[other].parent {
                Some(p) => other = p,
                None => return false,
            }
        }
    }

    /// One JSON object per line: `{level, id, center, parent, children, mass}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LatticeError> {
        #[derive(Serialize)]
        struct Line<'a> {
            level: i32,
            id: usize,
            center: Point,
            parent: Option<usize>,
            children: &'a [usize],
            mass: f64,
        }
        for c in &self.cubes {
            let line = Line {
                level: c.level,
                id: c.id,
                center: c.center,
                parent: c.parent,
                children: &c.children,
                mass: c.mass,
            };
            serde_json::to_writer(&mut w, &line).map_err(|e| LatticeError::Io(e.into()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Checks partition and nesting; returns a description of the first
    /// failure.
    pub fn check_invariants(&self, n_points: usize) -> Result<(), String> {
        for (t, ids) in self.levels.iter().enumerate() {
            let mut seen = vec![false; n_points];
            for &id in ids {
                let c = &self.cubes[id];
                if c.members.is_empty() {
                    return Err(format!("cube {id} is empty"));
                }
                for &m in &c.members {
                    if std::mem::replace(&mut seen[m], true) {
                        return Err(format!("point {m} in two cubes at level {}", c.level));
                    }
                }
            }
            if let Some(p) = seen.iter().position(|s| !s) {
                return Err(format!("point {p} uncovered at level index {t}"));
            }
        }
        for c in &self.cubes {
            if c.children.is_empty() {
                continue;
            }
            let mut union: Vec<usize> = c.children.iter().flat_map(|&ch| self.cubes[ch].members.iter().copied()).collect();
            union.sort_unstable();
            if union != c.members {
                return Err(format!("cube {} differs from the union of its children", c.id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CubeMassRow {
    pub id: usize,
    pub level: i32,
    /// `μ(𝒭_Q)/ℓ(Q)`.
    pub upper_ratio: f64,
    /// `C₀·μ(Q)/ℓ(Q)`.
    pub lower_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MassBoundsReport {
    pub theta0: Direction,
    pub density_sup: f64,
    pub rows: Vec<CubeMassRow>,
    pub max_upper_ratio: f64,
    /// `max μ(𝒭_Q)/(M·ℓ(Q))`.
    pub measured_c: f64,
    pub min_lower_ratio: f64,
}

/// First `θ₀` within `2·aspect` of `1/4` whose `π^⊥_{θ₀}` density is
/// non-degenerate with sup at most `m`.
pub fn find_density_direction(
    mu: &DiscreteMeasure,
    aspect: f64,
    m: f64,
    bin_width: f64,
) -> Result<Option<(Direction, f64)>, MeasureError> {
    for t in [0.0, 0.25, -0.25, 0.5, -0.5, 0.75, -0.75, 1.0, -1.0] {
        let theta = Direction::new(0.25 + t * 2.0 * aspect);
        let d = pushforward_density(mu, theta.perp(), bin_width)?;
        if !d.degenerate && d.sup_norm <= m {
            return Ok(Some((theta, d.sup_norm)));
        }
    }
    Ok(None)
}

/// `μ` of a closed axis-parallel box, using `by_x` (indices sorted by x).
pub(crate) fn box_mass(mu: &DiscreteMeasure, by_x: &[usize], lo: Point, hi: Point) -> f64 {
    let pts = mu.points();
    let start = by_x.partition_point(|&i| pts[i].x < lo.x - GEOM_TOL);
    let mut acc = 0.0;
    for &i in &by_x[start..] {
        let p = pts[i];
        if p.x > hi.x + GEOM_TOL {
            break;
        }
        if p.y >= lo.y - GEOM_TOL && p.y <= hi.y + GEOM_TOL {
            acc += mu.weights()[i];
        }
    }
    acc
}

pub(crate) fn sorted_by_x(mu: &DiscreteMeasure) -> Vec<usize> {
    let pts = mu.points();
    let mut v: Vec<usize> = (0..pts.len()).collect();
    v.sort_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x).then(a.cmp(&b)));
    v
}

pub fn cube_mass_bounds(
    lattice: &CubeLattice,
    mu: &DiscreteMeasure,
    m: f64,
    c0: f64,
    bin_width: f64,
) -> Result<MassBoundsReport, LatticeError> {
    let (theta0, density_sup) =
        find_density_direction(mu, lattice.aspect, m, bin_width)?.ok_or(LatticeError::HypothesisUnverified(m))?;
    let by_x = sorted_by_x(mu);
    let rows: Vec<CubeMassRow> = lattice
        .cubes
        .iter()
        .map(|c| {
            let half = Point::new(c.side / 2.0, c.tall / 2.0);
            let upper = box_mass(mu, &by_x, c.center - half, c.center + half);
            CubeMassRow { id: c.id, level: c.level, upper_ratio: upper / c.side, lower_ratio: c0 * c.mass / c.side }
        })
        .collect();
    let max_upper_ratio = rows.iter().map(|r| r.upper_ratio).fold(0.0, f64::max);
    let min_lower_ratio = rows.iter().map(|r| r.lower_ratio).fold(f64::INFINITY, f64::min);
    Ok(MassBoundsReport { theta0, density_sup, rows, max_upper_ratio, measured_c: max_upper_ratio / m, min_lower_ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::parallel_segments_simple;
    use crate::sets::DiscreteMeasure;

    fn segment_measure(h: f64) -> DiscreteMeasure {
        let s = parallel_segments_simple(Direction::new(0.0), &[0.0], &[1.0]).unwrap();
        DiscreteMeasure::sample(&s, h).unwrap()
    }

    #[test]
    fn top_level_formula() {
        assert_eq!(top_level(0.125, 0.5), 5);
        assert_eq!(top_level(1.0 / 6.0, 0.5), 4);
        assert_eq!(top_level(1.0, 0.5), 2);
        assert_eq!(top_level(0.25, 1e-3), 0);
    }

    #[test]
    fn single_point_lattice() {
        let mu = DiscreteMeasure::new(vec![Point::new(0.2, 0.3)], vec![1.0], 0.0).unwrap();
        let l = build_lattice(&mu, 0.5, 0.5, 4).unwrap();
        assert_eq!(l.cubes.len(), 4);
        assert!(l.cubes.iter().all(|c| c.center == Point::new(0.2, 0.3) && c.members == vec![0]));
        l.check_invariants(1).unwrap();
    }

    #[test]
    fn separated_points_stay_apart() {
        let mu = DiscreteMeasure::new(vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0)], vec![1.0, 1.0], 0.0).unwrap();
        let l = build_lattice_from(&mu, 1.0, 0.5, 0, 1).unwrap();
        assert_eq!(l.levels[0].len(), 2);
        assert!(l.cubes.iter().all(|c| c.members.len() == 1));
    }

    #[test]
    fn segment_lattice_invariants() {
        let mu = segment_measure(1e-3);
        let l = build_lattice(&mu, 0.25, 0.5, 6).unwrap();
        l.check_invariants(mu.len()).unwrap();
        assert!(l.c_in > 0.0 && l.c_out < 2.0 + 1e-9);
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), l.cubes.len());
    }

    #[test]
    fn sandwich_constants_at_small_rho() {
        let mu = segment_measure(1e-4);
        let l = build_lattice_from(&mu, 0.25, 1e-3, 0, 2).unwrap();
        l.check_invariants(mu.len()).unwrap();
        assert!(l.c_in >= 0.4 && l.c_out <= 2.0);
    }

    #[test]
    fn cube_rect_unfolds() {
        let mu = DiscreteMeasure::new(vec![Point::new(0.0, 0.0)], vec![1.0], 0.0).unwrap();
        let l = build_lattice_from(&mu, 0.25, 0.5, 2, 1).unwrap();
        let r = l.cube_rect(0);
        assert_eq!((r.short, r.long), (1.0, 4.0));
        assert_eq!(l.small_rect(0).center, r.center);
    }

    #[test]
    fn segment_mass_bounds() {
        let mu = segment_measure(1e-3);
        let l = build_lattice(&mu, 0.25, 0.5, 5).unwrap();
        let rep = cube_mass_bounds(&l, &mu, 1.5, 2.0, 1e-2).unwrap();
        assert!(rep.max_upper_ratio <= 1.6);
        let atom = DiscreteMeasure::new(vec![Point::new(0.0, 0.0)], vec![1.0], 0.0).unwrap();
        let la = build_lattice(&atom, 0.25, 0.5, 1).unwrap();
        assert!(matches!(cube_mass_bounds(&la, &atom, 1.5, 2.0, 1e-2), Err(LatticeError::HypothesisUnverified(_))));
    }
}
