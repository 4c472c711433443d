//! Angles on the circle `T = R/Z`, projections, cones, anisotropic rectangles
//! and the anisotropic metric.
//!
//! Angles are measured in turns: `1.0` is a full revolution and the unit
//! vector of a direction `θ` is `(cos 2πθ, sin 2πθ)`.

use std::f64::consts::TAU;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directions::DirectionSet;

/// Absolute tolerance used by every length comparison in this module.
pub const GEOM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("interval halfwidth {0} outside (0, 1/4]")]
    Halfwidth(f64),
    #[error("aspect {0} outside (0, 1]")]
    Aspect(f64),
    #[error("cone radii must satisfy 0 <= r_in < r_out, got ({0}, {1})")]
    Radii(f64, f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// A point (or vector) in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(a: [f64; 2]) -> Self {
        Point { x: a[0], y: a[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// Rotation about the origin by `turns`.
    pub fn rotate(self, turns: f64) -> Point {
        let (s, c) = (TAU * turns).sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// A direction on `T = R/Z`, stored in turns and normalized to `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct Direction(f64);

impl From<f64> for Direction {
    fn from(t: f64) -> Self {
        Direction::new(t)
    }
}

impl From<Direction> for f64 {
    fn from(d: Direction) -> Self {
        d.0
    }
}

impl Direction {
    pub fn new(theta: f64) -> Self {
        let t = theta.rem_euclid(1.0);
        Direction(if t >= 1.0 { 0.0 } else { t })
    }

    pub fn turns(self) -> f64 {
        self.0
    }

    /// Direction of a nonzero vector.
    pub fn of_vector(v: Point) -> Self {
        Direction::new(v.y.atan2(v.x) / TAU)
    }

    /// Circular distance, in `[0, 1/2]`.
    pub fn distance(self, other: Direction) -> f64 {
        let d = (self.0 - other.0).abs();
        d.min(1.0 - d)
    }

    /// `θ + 1/4`.
    pub fn perp(self) -> Self {
        Direction::new(self.0 + 0.25)
    }

    pub fn rotate(self, turns: f64) -> Self {
        Direction::new(self.0 + turns)
    }

    /// `e_θ = (cos 2πθ, sin 2πθ)`.
    pub fn unit(self) -> Point {
        let (s, c) = (TAU * self.0).sin_cos();
        Point::new(c, s)
    }
}

/// `π_θ(p) = e_θ · p`.
pub fn project(p: Point, theta: Direction) -> f64 {
    p.dot(theta.unit())
}

/// `π_θ^⊥(p) = π_{θ+1/4}(p)`.
pub fn project_perp(p: Point, theta: Direction) -> f64 {
    project(p, theta.perp())
}

/// The closed arc `[center − halfwidth, center + halfwidth]` on `T`.
///
/// Constructed intervals have halfwidth in `(0, 1/4]`; dilations such as `3J`
/// may exceed `1/4`, in which case the cone they generate is the whole plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleInterval {
    pub center: Direction,
    pub halfwidth: f64,
}

impl AngleInterval {
    pub fn new(center: Direction, halfwidth: f64) -> Result<Self, GeometryError> {
        if !(halfwidth > 0.0 && halfwidth <= 0.25) {
            return Err(GeometryError::Halfwidth(halfwidth));
        }
        Ok(AngleInterval { center, halfwidth })
    }

    /// `C·I`: same center, halfwidth scaled by `c`.
    pub fn dilate(&self, c: f64) -> AngleInterval {
        AngleInterval { center: self.center, halfwidth: self.halfwidth * c }
    }

    /// `ℋ¹(I) = 2·halfwidth`.
    pub fn measure(&self) -> f64 {
        2.0 * self.halfwidth
    }

    /// Membership of a direction in the arc.
    pub fn contains(&self, theta: Direction) -> bool {
        theta.distance(self.center) <= self.halfwidth + GEOM_TOL
    }

    /// Whether the line spanned by `v` belongs to `X(0, I)`:
    /// `|π^⊥_θ(v)| ≤ sin(2πa)|v|`.
    pub fn contains_line(&self, v: Point) -> bool {
        if self.halfwidth >= 0.25 {
            return true;
        }
        let lhs = project_perp(v, self.center).abs();
        lhs <= (TAU * self.halfwidth).sin() * v.norm() + GEOM_TOL
    }
}

/// Direction family of a cone.
#[derive(Clone, Debug, PartialEq)]
pub enum ConeDirections {
    Interval(AngleInterval),
    Set(DirectionSet),
}

impl ConeDirections {
    pub fn contains_line(&self, v: Point) -> bool {
        match self {
            ConeDirections::Interval(i) => i.contains_line(v),
            ConeDirections::Set(s) => s.contains_line(v),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ConeDirections::Interval(_) => false,
            ConeDirections::Set(s) => s.count() == 0,
        }
    }
}

/// `X(x, I, r_in, r_out)`: lines through `apex` with directions in `I`,
/// restricted to `r_in < |y − x| ≤ r_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cone {
    pub apex: Point,
    pub directions: ConeDirections,
    pub r_in: f64,
    pub r_out: f64,
}

impl Cone {
    pub fn new(
        apex: Point,
        directions: ConeDirections,
        r_in: f64,
        r_out: f64,
    ) -> Result<Self, GeometryError> {
        if !(r_in >= 0.0 && r_out > r_in) {
            return Err(GeometryError::Radii(r_in, r_out));
        }
        Ok(Cone { apex, directions, r_in, r_out })
    }

    /// Untruncated cone `X(x, I)`.
    pub fn full(apex: Point, directions: ConeDirections) -> Self {
        Cone { apex, directions, r_in: 0.0, r_out: f64::INFINITY }
    }

    pub fn contains(&self, y: Point) -> bool {
        let v = y - self.apex;
        let d = v.norm();
        if d == 0.0 {
            return self.r_in == 0.0 && !self.directions.is_empty();
        }
        radial_ok(d, self.r_in, self.r_out) && self.directions.contains_line(v)
    }
}

/// Radial part of cone membership: open at `r_in` (unless `r_in = 0`),
/// closed at `r_out`.
pub fn radial_ok(d: f64, r_in: f64, r_out: f64) -> bool {
    let inner = r_in == 0.0 || d > r_in + GEOM_TOL;
    inner && d <= r_out + GEOM_TOL
}

/// `d((x₁,y₁),(x₂,y₂)) = max(|x₁−x₂|, aspect·|y₁−y₂|)`.
pub fn aniso_metric(p: Point, q: Point, aspect: f64) -> f64 {
    (p.x - q.x).abs().max(aspect * (p.y - q.y).abs())
}

/// A closed rectangle whose long side points along `orientation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnisoRect {
    pub center: Point,
    pub short: f64,
    pub long: f64,
    pub orientation: Direction,
}

impl AnisoRect {
    /// `𝒭(x, r) = x + [−r/2, r/2] × [−r/(2·aspect), r/(2·aspect)]`.
    pub fn standard(center: Point, r: f64, aspect: f64) -> Self {
        AnisoRect { center, short: r, long: r / aspect, orientation: Direction::new(0.25) }
    }

    /// `C·𝒭`.
    pub fn scaled(&self, c: f64) -> Self {
        AnisoRect { short: self.short * c, long: self.long * c, ..*self }
    }

    pub fn contains(&self, p: Point) -> bool {
        let v = p - self.center;
        let along = project(v, self.orientation).abs();
        let across = project_perp(v, self.orientation).abs();
        along <= self.long / 2.0 + GEOM_TOL && across <= self.short / 2.0 + GEOM_TOL
    }

    /// Image of the rectangle under `π_θ`, as a closed interval.
    pub fn projection(&self, theta: Direction) -> (f64, f64) {
        let c = project(self.center, theta);
        let e = theta.unit();
        let u = self.orientation.unit();
        let w = self.orientation.perp().unit();
        let half = 0.5 * (self.long * e.dot(u).abs() + self.short * e.dot(w).abs());
        (c - half, c + half)
    }

    pub fn corners(&self) -> [Point; 4] {
        let u = self.orientation.unit() * (self.long / 2.0);
        let w = self.orientation.perp().unit() * (self.short / 2.0);
        let c = self.center;
        [c + u + w, c + u - w, c - u - w, c - u + w]
    }
}
