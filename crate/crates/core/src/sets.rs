//! Exact planar supports, sampled measures, projections, Favard length,
//! pushforward densities, AD-regularity estimates, cone masses and the
//! spectrum of spanned directions.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directions::{DirectionError, DirectionSet};
use crate::geometry::{project, Cone, Direction, Point, GEOM_TOL};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid primitive {index}: {reason}")]
    InvalidPrimitive { index: usize, reason: String },
    #[error("set carries no mass")]
    EmptySet,
    #[error("resolution must be positive, got {0}")]
    Resolution(f64),
    #[error("bin width must be positive, got {0}")]
    BinWidth(f64),
    #[error("sample is empty")]
    EmptySample,
    #[error("sample point {0} has a non-finite coordinate or non-positive weight")]
    BadSample(usize),
    #[error("quadrature under-resolved: {0} nodes per decade (need at least 16)")]
    QuadratureUnderresolved(usize),
    #[error("at least 16 angles required, got {0}")]
    TooFewAngles(usize),
    #[error(transparent)]
    Direction(#[from] DirectionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A support piece carrying one-dimensional mass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Segment { a: Point, b: Point, mass: f64 },
    Box { center: Point, side: f64, mass: f64 },
}

impl Primitive {
    pub fn mass(&self) -> f64 {
        match *self {
            Primitive::Segment { mass, .. } | Primitive::Box { mass, .. } => mass,
        }
    }

    /// `π_θ` of the primitive, a closed interval.
    pub fn projection(&self, theta: Direction) -> (f64, f64) {
        match *self {
            Primitive::Segment { a, b, .. } => {
                let (pa, pb) = (project(a, theta), project(b, theta));
                (pa.min(pb), pa.max(pb))
            }
            Primitive::Box { center, side, .. } => {
                let e = theta.unit();
                let half = 0.5 * side * (e.x.abs() + e.y.abs());
                let c = project(center, theta);
                (c - half, c + half)
            }
        }
    }

    pub fn vertices(&self) -> Vec<Point> {
        match *self {
            Primitive::Segment { a, b, .. } => vec![a, b],
            Primitive::Box { center, side, .. } => {
                let h = side / 2.0;
                vec![
                    center + Point::new(-h, -h),
                    center + Point::new(h, -h),
                    center + Point::new(h, h),
                    center + Point::new(-h, h),
                ]
            }
        }
    }

    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Primitive {
        match *self {
            Primitive::Segment { a, b, mass } => Primitive::Segment { a: f(a), b: f(b), mass },
            Primitive::Box { center, side, mass } => Primitive::Box { center: f(center), side, mass },
        }
    }

    fn validate(&self, index: usize) -> Result<(), MeasureError> {
        let bad = |reason: &str| Err(MeasureError::InvalidPrimitive { index, reason: reason.into() });
        let m = self.mass();
        if !(m.is_finite() && m >= 0.0) {
            return bad("mass must be finite and nonnegative");
        }
        match *self {
            Primitive::Segment { a, b, .. } if !(a.is_finite() && b.is_finite()) => bad("non-finite endpoint"),
            Primitive::Box { center, side, .. } if !(center.is_finite() && side.is_finite() && side > 0.0) => {
                bad("box needs a finite center and positive side")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SetFile {
    primitives: Vec<Primitive>,
}

/// Union of primitives, the exact support used for projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SetFile", into = "SetFile")]
pub struct PlanarSet {
    primitives: Vec<Primitive>,
    total_mass: f64,
    diameter: f64,
}

impl TryFrom<SetFile> for PlanarSet {
    type Error = MeasureError;
    fn try_from(f: SetFile) -> Result<Self, MeasureError> {
        PlanarSet::new(f.primitives)
    }
}

impl From<PlanarSet> for SetFile {
    fn from(s: PlanarSet) -> Self {
        SetFile { primitives: s.primitives }
    }
}

impl PlanarSet {
    pub fn new(primitives: Vec<Primitive>) -> Result<Self, MeasureError> {
        for (i, p) in primitives.iter().enumerate() {
            p.validate(i)?;
        }
        let total_mass: f64 = primitives.iter().map(Primitive::mass).sum();
        if !(total_mass > 0.0) {
            return Err(MeasureError::EmptySet);
        }
        let vertices: Vec<Point> = primitives.iter().flat_map(|p| p.vertices()).collect();
        let diameter = diameter_of(&vertices);
        Ok(PlanarSet { primitives, total_mass, diameter })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn to_json(&self) -> Result<String, MeasureError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MeasureError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Image under `p ↦ f(p)`; `f` must be a rigid motion for box sides to
    /// stay meaningful.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Result<Self, MeasureError> {
        PlanarSet::new(self.primitives.iter().map(|p| p.map_points(&f)).collect())
    }
}

/// Andrew's monotone chain; collinear points dropped.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point, a: Point, b: Point| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn diameter_of(points: &[Point]) -> f64 {
    let hull = convex_hull(points);
    let mut best = 0.0f64;
    for i in 0..hull.len() {
        for j in i + 1..hull.len() {
            best = best.max(hull[i].dist(hull[j]));
        }
    }
    best
}

/// Length of a union of closed intervals.
pub fn union_length(intervals: &mut [(f64, f64)]) -> f64 {
    intervals.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut total = 0.0;
    let mut iter = intervals.iter();
    let Some(&(mut lo, mut hi)) = iter.next() else { return 0.0 };
    for &(a, b) in iter {
        if a <= hi {
            hi = hi.max(b);
        } else {
            total += hi - lo;
            lo = a;
            hi = b;
        }
    }
    total + (hi - lo)
}

/// `ℋ¹(π_θ(E))`, exact interval-union arithmetic.
pub fn projection_length(set: &PlanarSet, theta: Direction) -> f64 {
    let mut iv: Vec<(f64, f64)> = set.primitives.iter().map(|p| p.projection(theta)).collect();
    union_length(&mut iv)
}

/// `(θ_k, ℋ¹(π_{θ_k}E))` at the midpoints `θ_k = (k + ½)/n`.
pub fn projection_profile(set: &PlanarSet, n_angles: usize) -> Vec<(f64, f64)> {
    (0..n_angles)
        .into_par_iter()
        .map(|k| {
            let t = (k as f64 + 0.5) / n_angles as f64;
            (t, projection_length(set, Direction::new(t)))
        })
        .collect()
}

/// Midpoint-rule Favard length `∫₀¹ ℋ¹(π_θE) dθ`.
pub fn favard(set: &PlanarSet, n_angles: usize) -> Result<f64, MeasureError> {
    if n_angles < 16 {
        return Err(MeasureError::TooFewAngles(n_angles));
    }
    let profile = projection_profile(set, n_angles);
    Ok(profile.iter().map(|&(_, l)| l).sum::<f64>() / n_angles as f64)
}

/// Favard length at `n_angles` with the a posteriori estimate
/// `|F(n) − F(n/2)|` of its quadrature error.
pub fn favard_with_error(set: &PlanarSet, n_angles: usize) -> Result<(f64, f64), MeasureError> {
    if n_angles < 32 {
        return Err(MeasureError::TooFewAngles(n_angles));
    }
    let fine = favard(set, n_angles)?;
    let coarse = favard(set, n_angles / 2)?;
    Ok((fine, (fine - coarse).abs()))
}

/// Weighted point sample of a [`PlanarSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<Point>,
    weights: Vec<f64>,
    total: f64,
    spacing: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    x: f64,
    y: f64,
    w: f64,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Point>, weights: Vec<f64>, spacing: f64) -> Result<Self, MeasureError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(MeasureError::EmptySample);
        }
        for (i, (p, w)) in points.iter().zip(&weights).enumerate() {
            if !(p.is_finite() && w.is_finite() && *w > 0.0) {
                return Err(MeasureError::BadSample(i));
            }
        }
        if !(spacing.is_finite() && spacing >= 0.0) {
            return Err(MeasureError::Resolution(spacing));
        }
        let total = weights.iter().sum();
        Ok(DiscreteMeasure { points, weights, total, spacing })
    }

    /// Deterministic sample: a primitive of mass `m` is cut into `k = ⌈m/h⌉`
    /// equal pieces (segments) or a `g × g` grid with `g = ⌈√k⌉` (boxes), one
    /// midpoint per piece. `spacing` records the largest piece diameter along
    /// the support.
    pub fn sample(set: &PlanarSet, h: f64) -> Result<Self, MeasureError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(MeasureError::Resolution(h));
        }
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut spacing = 0.0f64;
        for p in &set.primitives {
            let m = p.mass();
            if m == 0.0 {
                continue;
            }
            let k = (m / h).ceil().max(1.0) as usize;
            match *p {
                Primitive::Segment { a, b, .. } => {
                    let w = m / k as f64;
                    for i in 0..k {
                        let t = (i as f64 + 0.5) / k as f64;
                        points.push(a + (b - a) * t);
                        weights.push(w);
                    }
                    spacing = spacing.max(a.dist(b) / k as f64);
                }
                Primitive::Box { center, side, .. } => {
                    let g = (k as f64).sqrt().ceil() as usize;
                    let w = m / (g * g) as f64;
                    let pitch = side / g as f64;
                    let origin = center - Point::new(side / 2.0, side / 2.0);
                    for iy in 0..g {
                        for ix in 0..g {
                            let off = Point::new((ix as f64 + 0.5) * pitch, (iy as f64 + 0.5) * pitch);
                            points.push(origin + off);
                            weights.push(w);
                        }
                    }
                    spacing = spacing.max(pitch);
                }
            }
        }
        DiscreteMeasure::new(points, weights, spacing)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Geometric sample spacing; the default apex exclusion radius.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn diameter(&self) -> f64 {
        diameter_of(&self.points)
    }

    /// `(min corner, max corner)`.
    pub fn bbox(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    /// Appends atoms, e.g. for corruption experiments.
    pub fn with_points(&self, extra: &[(Point, f64)]) -> Result<Self, MeasureError> {
        let mut points = self.points.clone();
        let mut weights = self.weights.clone();
        for &(p, w) in extra {
            points.push(p);
            weights.push(w);
        }
        DiscreteMeasure::new(points, weights, self.spacing)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MeasureError> {
        let mut wr = csv::Writer::from_writer(w);
        for (p, &wt) in self.points.iter().zip(&self.weights) {
            wr.serialize(CsvRow { x: p.x, y: p.y, w: wt })?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads `x,y,w` rows, skipping `#` lines; spacing is estimated as the
    /// median nearest neighbour distance of a prefix of the sample.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, MeasureError> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for row in rd.deserialize() {
            let row: CsvRow = row?;
            points.push(Point::new(row.x, row.y));
            weights.push(row.w);
        }
        let spacing = estimate_spacing(&points);
        DiscreteMeasure::new(points, weights, spacing)
    }
}

fn estimate_spacing(points: &[Point]) -> f64 {
    let n = points.len().min(512);
    let mut nn: Vec<f64> = (0..n)
        .filter_map(|i| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, q)| j != i && *q != points[i])
                .map(|(_, q)| q.dist(points[i]))
                .min_by(f64::total_cmp)
        })
        .collect();
    if nn.is_empty() {
        return 0.0;
    }
    nn.sort_by(f64::total_cmp);
    nn[nn.len() / 2]
}

/// Histogram density of `π_θ μ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityProfile {
    pub theta: Direction,
    pub bin_width: f64,
    /// Left edge of bin 0.
    pub origin: f64,
    /// Mass per unit length in each bin.
    pub bins: Vec<f64>,
    pub sup_norm: f64,
    pub l2_norm_sq: f64,
    /// A single bin holds more than half of the mass.
    pub degenerate: bool,
}

impl DensityProfile {
    pub fn mass(&self) -> f64 {
        self.bins.iter().sum::<f64>() * self.bin_width
    }
}

pub fn pushforward_density(
    mu: &DiscreteMeasure,
    theta: Direction,
    bin_width: f64,
) -> Result<DensityProfile, MeasureError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(MeasureError::BinWidth(bin_width));
    }
    let proj: Vec<f64> = mu.points.iter().map(|&p| project(p, theta)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let origin = (lo / bin_width).floor() * bin_width;
    let n = ((hi - origin) / bin_width).floor() as usize + 1;
    let mut mass = vec![0.0; n];
    for (&t, &w) in proj.iter().zip(&mu.weights) {
        let i = (((t - origin) / bin_width).floor().max(0.0) as usize).min(n - 1);
        mass[i] += w;
    }
    let max_mass = mass.iter().copied().fold(0.0, f64::max);
    let bins: Vec<f64> = mass.iter().map(|m| m / bin_width).collect();
    let sup_norm = bins.iter().copied().fold(0.0, f64::max);
    let l2_norm_sq = bins.iter().map(|b| b * b * bin_width).sum();
    Ok(DensityProfile {
        theta,
        bin_width,
        origin,
        bins,
        sup_norm,
        l2_norm_sq,
        degenerate: max_mass > 0.5 * mu.total,
    })
}

/// Smallest `C` with `C⁻¹r ≤ μ(B(x,r)) ≤ Cr` over sampled centers and
/// log-spaced radii in `(10·spacing, diam)`; `∞` when no radius fits.
pub fn ad_constant(mu: &DiscreteMeasure, set: &PlanarSet, n_centers: usize, n_radii: usize) -> f64 {
    let lo = 10.0 * mu.spacing;
    let hi = set.diameter();
    if mu.len() < 2 || n_centers == 0 || n_radii == 0 || !(hi > lo) {
        return f64::INFINITY;
    }
    let radii: Vec<f64> =
        (0..n_radii).map(|j| lo * (hi / lo).powf((j as f64 + 0.5) / n_radii as f64)).collect();
    let step = (mu.len() as f64 / n_centers.min(mu.len()) as f64).max(1.0);
    let centers: Vec<usize> = (0..n_centers.min(mu.len())).map(|i| (i as f64 * step) as usize).collect();
    centers
        .par_iter()
        .map(|&c| {
            let x = mu.points[c];
            let mut d: Vec<(f64, f64)> = mu.points.iter().zip(&mu.weights).map(|(p, &w)| (p.dist(x), w)).collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut worst = 0.0f64;
            let mut k = 0;
            let mut acc = 0.0;
            for &r in &radii {
                while k < d.len() && d[k].0 <= r {
                    acc += d[k].1;
                    k += 1;
                }
                worst = worst.max(acc / r).max(r / acc);
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

/// `μ(cone)` restricted to points farther than `exclude_apex_radius` from
/// the apex.
pub fn cone_mass(mu: &DiscreteMeasure, cone: &Cone, exclude_apex_radius: f64) -> f64 {
    let mut acc = 0.0;
    for (p, &w) in mu.points.iter().zip(&mu.weights) {
        if p.dist(cone.apex) > exclude_apex_radius && cone.contains(*p) {
            acc += w;
        }
    }
    acc
}

/// Depth-`D` cells hit by `arg(x − y)` for sampled pairs `x ≠ y`, closed
/// under `θ ↦ θ + 1/2`.
pub fn direction_spectrum(mu: &DiscreteMeasure, depth: u32) -> Result<DirectionSet, MeasureError> {
    let empty = DirectionSet::empty(depth)?;
    let n_cells = empty.len();
    let half = n_cells / 2;
    let pts = &mu.points;
    let marks = (0..pts.len())
        .into_par_iter()
        .fold(
            || vec![false; n_cells.max(1)],
            |mut acc, i| {
                for j in i + 1..pts.len() {
                    let v = pts[j] - pts[i];
                    if v.x == 0.0 && v.y == 0.0 {
                        continue;
                    }
                    let t = Direction::of_vector(v).turns().rem_euclid(0.5);
                    let c = ((t * n_cells as f64) as usize).min(n_cells - 1);
                    acc[c] = true;
                    if half > 0 {
                        acc[(c + half) % n_cells] = true;
                    }
                }
                acc
            },
        )
        .reduce(|| vec![false; n_cells.max(1)], |a, b| a.iter().zip(&b).map(|(x, y)| *x || *y).collect());
    Ok(DirectionSet::from_cells(depth, marks.iter().enumerate().filter(|(_, m)| **m).map(|(c, _)| c))?)
}

/// Quadrature resolution in `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadParams {
    pub nodes_per_decade: usize,
}

impl Default for QuadParams {
    fn default() -> Self {
        QuadParams { nodes_per_decade: 16 }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), MeasureError> {
        if self.nodes_per_decade < 16 {
            return Err(MeasureError::QuadratureUnderresolved(self.nodes_per_decade));
        }
        Ok(())
    }
}

/// Log-midpoint rule for `∫_a^b f(r) dr/r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogQuadrature {
    pub a: f64,
    pub b: f64,
    pub du: f64,
    pub nodes: Vec<f64>,
}

impl LogQuadrature {
    /// `n = max(q, ⌈q·log₁₀(b/a)⌉)` nodes.
    pub fn new(a: f64, b: f64, q: usize) -> Self {
        let n = q.max((q as f64 * (b / a).log10()).ceil() as usize).max(1);
        let du = (b / a).ln() / n as f64;
        let nodes = (0..n).map(|j| a * ((j as f64 + 0.5) * du).exp()).collect();
        LogQuadrature { a, b, du, nodes }
    }

    /// `Σ_j du·F(r_j)/r_j` for `F(r) = Σ_{d_i ≤ r} w_i`; `partners` sorted
    /// by distance.
    pub fn integrate_cone(&self, partners: &[(f64, f64)]) -> f64 {
        let mut k = 0;
        let mut mass = 0.0;
        let mut acc = 0.0;
        for &r in &self.nodes {
            while k < partners.len() && partners[k].0 <= r + GEOM_TOL {
                mass += partners[k].1;
                k += 1;
            }
            acc += mass / r;
        }
        acc * self.du
    }
}

pub fn sort_partners(p: &mut [(f64, f64)]) {
    p.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
}

/// Uniform grid over a sample, used to enumerate candidates for cone
/// queries without touching every point.
pub struct ConeIndex<'a> {
    mu: &'a DiscreteMeasure,
    origin: Point,
    cell: Point,
    nx: usize,
    ny: usize,
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> ConeIndex<'a> {
    pub fn new(mu: &'a DiscreteMeasure) -> Self {
        let side = ((mu.len() as f64).sqrt() / 4.0).ceil().clamp(1.0, 48.0) as usize;
        let (lo, hi) = mu.bbox();
        let ext = hi - lo;
        let span = ext.x.max(ext.y).max(1e-9);
        let nx = if ext.x > span * 1e-3 { side } else { 1 };
        let ny = if ext.y > span * 1e-3 { side } else { 1 };
        let cell = Point::new(ext.x.max(1e-12) / nx as f64, ext.y.max(1e-12) / ny as f64);
        let mut counts = vec![0usize; nx * ny + 1];
        let idx: Vec<usize> = mu
            .points
            .iter()
            .map(|p| {
                let ix = (((p.x - lo.x) / cell.x) as usize).min(nx - 1);
                let iy = (((p.y - lo.y) / cell.y) as usize).min(ny - 1);
                iy * nx + ix
            })
            .collect();
        for &c in &idx {
            counts[c + 1] += 1;
        }
        for c in 0..nx * ny {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0; mu.len()];
        for (i, &c) in idx.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        ConeIndex { mu, origin: lo, cell, nx, ny, starts: counts, items }
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        self.mu
    }

    /// Calls `f` on every point that may lie within `r_max` of `apex` along a
    /// line whose direction is within `hull = (center, halfwidth)` modulo
    /// `1/2`. Culling is conservative; callers still test membership.
    pub fn for_each_candidate(
        &self,
        apex: Point,
        hull: Option<(Direction, f64)>,
        r_max: f64,
        mut f: impl FnMut(usize),
    ) {
        let axis = hull.filter(|h| h.1 < 0.245).map(|(c, a)| (c.unit(), c.perp().unit(), (std::f64::consts::TAU * a).tan()));
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let c = iy * self.nx + ix;
                let (s, e) = (self.starts[c], self.starts[c + 1]);
                if s == e {
                    continue;
                }
                let lo = Point::new(self.origin.x + ix as f64 * self.cell.x, self.origin.y + iy as f64 * self.cell.y);
                let hi = lo + self.cell;
                let slack = 1e-9 * (1.0 + self.cell.x + self.cell.y);
                let dx = (lo.x - apex.x).max(apex.x - hi.x).max(0.0);
                let dy = (lo.y - apex.y).max(apex.y - hi.y).max(0.0);
                if (dx * dx + dy * dy).sqrt() > r_max + slack {
                    continue;
                }
                if let Some((u, w, t)) = axis {
                    let corners = [lo, Point::new(hi.x, lo.y), hi, Point::new(lo.x, hi.y)];
                    let (mut umax, mut vmin, mut vmax) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
                    for q in corners {
                        let d = q - apex;
                        umax = umax.max(d.dot(u).abs());
                        let v = d.dot(w);
                        vmin = vmin.min(v);
                        vmax = vmax.max(v);
                    }
                    let vabs = if vmin <= 0.0 && vmax >= 0.0 { 0.0 } else { vmin.abs().min(vmax.abs()) };
                    if vabs > t * umax + slack {
                        continue;
                    }
                }
                for &i in &self.items[s..e] {
                    f(i);
                }
            }
        }
    }
}

/// Both sides of the cone-energy inequality for `G^⊥ = G + 1/4`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConeEnergyReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    pub r_min: f64,
    pub r_max: f64,
    pub nodes: usize,
}

/// `∬ μ(X(x,G^⊥,r))/r dr/r dμ(x)` over `r ∈ [spacing, diam]` against
/// `M·ℋ(G)·μ(E)`.
pub fn check_cone_energy_bound(
    mu: &DiscreteMeasure,
    g: &DirectionSet,
    m: f64,
    quad: QuadParams,
) -> Result<ConeEnergyReport, MeasureError> {
    quad.validate()?;
    let r_min = mu.spacing.max(1e-12);
    let r_max = mu.diameter();
    let rhs = m * g.measure() * mu.total;
    if g.is_empty() || !(r_max > r_min) {
        return Ok(ConeEnergyReport { lhs: 0.0, rhs, ratio: None, r_min, r_max, nodes: 0 });
    }
    let gp = g.rotate_quarter()?;
    let hull = gp.line_hull();
    let rule = LogQuadrature::new(r_min, r_max, quad.nodes_per_decade);
    let index = ConeIndex::new(mu);
    let per_point: Vec<f64> = (0..mu.len())
        .into_par_iter()
        .map(|i| {
            let x = mu.points[i];
            let mut partners = Vec::new();
            index.for_each_candidate(x, hull, r_max, |j| {
                let v = mu.points[j] - x;
                let d = v.norm();
                if d > r_min && gp.contains_line(v) {
                    partners.push((d, mu.weights[j]));
                }
            });
            sort_partners(&mut partners);
            mu.weights[i] * rule.integrate_cone(&partners)
        })
        .collect();
    let lhs: f64 = per_point.iter().sum();
    Ok(ConeEnergyReport {
        lhs,
        rhs,
        ratio: (rhs > 0.0).then(|| lhs / rhs),
        r_min,
        r_max,
        nodes: rule.nodes.len(),
    })
}

/// `x ↦ (x₀, x₁)` order used for deterministic tie-breaking.
pub fn lex_cmp(a: Point, b: Point) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AngleInterval, ConeDirections};

    fn unit_segment() -> PlanarSet {
        PlanarSet::new(vec![Primitive::Segment { a: Point::new(0.0, 0.0), b: Point::new(1.0, 0.0), mass: 1.0 }])
            .unwrap()
    }

    #[test]
    fn segment_projections() {
        let s = unit_segment();
        assert_eq!(projection_length(&s, Direction::new(0.0)), 1.0);
        let l = projection_length(&s, Direction::new(0.125));
        assert!((l - 0.5f64.sqrt()).abs() < 1e-12);
        let f = favard(&s, 4096).unwrap();
        assert!((f - 2.0 / std::f64::consts::PI).abs() < 1e-3);
    }

    #[test]
    fn point_has_zero_favard() {
        let p = Point::new(0.3, 0.4);
        let s = PlanarSet::new(vec![Primitive::Segment { a: p, b: p, mass: 1.0 }]).unwrap();
        assert_eq!(favard(&s, 64).unwrap(), 0.0);
        assert!(favard(&s, 8).is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = unit_segment();
        let t = s.to_json().unwrap();
        assert!(t.contains("\"kind\": \"segment\""));
        assert_eq!(PlanarSet::from_json(&t).unwrap(), s);
        assert!(PlanarSet::from_json(r#"{"primitives":[]}"#).is_err());
    }

    #[test]
    fn sampling_conserves_mass() {
        let s = unit_segment();
        let mu = DiscreteMeasure::sample(&s, 1e-3).unwrap();
        assert_eq!(mu.len(), 1000);
        assert!((mu.total() - 1.0).abs() < 1e-12);
        assert!((mu.spacing() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let mu = DiscreteMeasure::sample(&unit_segment(), 0.1).unwrap();
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x,y,w\n"));
        let back = DiscreteMeasure::read_csv(&buf[..]).unwrap();
        assert_eq!(back.points(), mu.points());
        assert!((back.spacing() - 0.1).abs() < 1e-9);
    }

    #[test]
    fn density_examples() {
        let mu = DiscreteMeasure::sample(&unit_segment(), 1e-5).unwrap();
        let d = pushforward_density(&mu, Direction::new(0.0), 1e-2).unwrap();
        assert!((d.sup_norm - 1.0).abs() < 0.05);
        assert!((d.mass() - 1.0).abs() < 1e-9);
        assert!(!d.degenerate);
        let d = pushforward_density(&mu, Direction::new(0.25), 1e-2).unwrap();
        assert!(d.degenerate);
        let d = pushforward_density(&mu, Direction::new(0.125), 1e-2).unwrap();
        assert!((d.sup_norm - 2f64.sqrt()).abs() < 0.07);
    }

    #[test]
    fn ad_constant_of_segment_and_atom() {
        let s = unit_segment();
        let mu = DiscreteMeasure::sample(&s, 1e-3).unwrap();
        let c = ad_constant(&mu, &s, 50, 20);
        assert!((c - 2.0).abs() < 0.1, "{c}");
        let p = Point::new(0.0, 0.0);
        let atom = PlanarSet::new(vec![Primitive::Segment { a: p, b: p, mass: 1.0 }]).unwrap();
        let mu = DiscreteMeasure::new(vec![p], vec![1.0], 0.0).unwrap();
        assert!(ad_constant(&mu, &atom, 10, 10).is_infinite());
    }

    #[test]
    fn cone_mass_examples() {
        let mu = DiscreteMeasure::new(vec![Point::new(0.0, 0.0), Point::new(0.0, 1.0)], vec![1.0, 1.0], 1e-6)
            .unwrap();
        let j = AngleInterval::new(Direction::new(0.25), 1.0 / 16.0).unwrap();
        let cone = Cone::new(Point::new(0.0, 0.0), ConeDirections::Interval(j), 0.0, 2.0).unwrap();
        assert_eq!(cone_mass(&mu, &cone, 1e-6), 1.0);
        let cone = Cone { r_out: 0.5, ..cone };
        assert_eq!(cone_mass(&mu, &cone, 1e-6), 0.0);
        let empty = Cone::full(Point::new(0.0, 0.0), ConeDirections::Set(DirectionSet::empty(4).unwrap()));
        assert_eq!(cone_mass(&mu, &empty, 0.0), 0.0);
    }

    #[test]
    fn spectrum_examples() {
        let mu = DiscreteMeasure::sample(&unit_segment(), 0.05).unwrap();
        let s = direction_spectrum(&mu, 6).unwrap();
        assert_eq!(s.cells().collect::<Vec<_>>(), vec![0, 32]);
        let one = DiscreteMeasure::new(vec![Point::new(1.0, 1.0)], vec![1.0], 0.0).unwrap();
        assert!(direction_spectrum(&one, 6).unwrap().is_empty());
    }

    #[test]
    fn quadrature_node_count() {
        let q = LogQuadrature::new(1e-3, 1.0, 16);
        assert_eq!(q.nodes.len(), 48);
        let q = LogQuadrature::new(0.5, 1.0, 16);
        assert_eq!(q.nodes.len(), 16);
        // ∫_a^b (1/r) dr/r with a single partner at distance 0.
        let q = LogQuadrature::new(0.1, 1.0, 64);
        let v = q.integrate_cone(&[(0.0, 1.0)]);
        assert!((v - 9.0).abs() < 1e-2);
    }

    #[test]
    fn cone_energy_bound_examples() {
        let vert = PlanarSet::new(vec![Primitive::Segment {
            a: Point::new(0.0, 0.0),
            b: Point::new(0.0, 1.0),
            mass: 1.0,
        }])
        .unwrap();
        let g = DirectionSet::from_cells(8, [0, 255]).unwrap();
        let mu = DiscreteMeasure::sample(&vert, 1e-2).unwrap();
        let r = check_cone_energy_bound(&mu, &g, 1.0, QuadParams::default()).unwrap();
        assert!(r.lhs > 1.0 && r.lhs.is_finite());
        let mu = DiscreteMeasure::sample(&unit_segment(), 1e-2).unwrap();
        let r = check_cone_energy_bound(&mu, &g, 1.0, QuadParams::default()).unwrap();
        assert_eq!(r.lhs, 0.0);
        let r = check_cone_energy_bound(&mu, &DirectionSet::empty(8).unwrap(), 1.0, QuadParams::default()).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
        let bad = QuadParams { nodes_per_decade: 8 };
        assert!(check_cone_energy_bound(&mu, &g, 1.0, bad).is_err());
    }
}
