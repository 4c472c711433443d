//! Deterministic constructors for test families, all normalized to total
//! mass 1 and diameter at most `√2`.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::geometry::{Direction, Point, GEOM_TOL};
use crate::sets::{MeasureError, PlanarSet, Primitive};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("{0}")]
    Precondition(String),
    #[error("segments {0} and {1} intersect")]
    Overlap(usize, usize),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// One segment of a parallel family: `offset` across the common direction,
/// `start` along it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub offset: f64,
    pub start: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorSpec {
    Cantor4 { n: u32 },
    ParallelSegments { direction: Direction, placements: Vec<Placement> },
    LipschitzGraph { lip: f64, n_nodes: usize, seed: u64 },
    FromFile { path: PathBuf },
}

impl GeneratorSpec {
    /// `kind = cantor4 | segments | lipschitz | file` plus per-kind keys:
    /// `n`; `direction, offsets, lengths[, starts]`; `lip, nodes, seed`;
    /// `path`.
    pub fn from_config(kv: &KeyValues) -> Result<Self, GeneratorError> {
        let kind: String = kv.require("kind")?;
        Ok(match kind.as_str() {
            "cantor4" => GeneratorSpec::Cantor4 { n: kv.require("n")? },
            "segments" | "parallel_segments" => {
                let offsets: Vec<f64> = kv.list("offsets")?.ok_or_else(|| ConfigError::Missing("offsets".into()))?;
                let lengths: Vec<f64> =
                    kv.list("lengths")?.unwrap_or_else(|| vec![1.0; offsets.len()]);
                let starts: Vec<f64> = kv.list("starts")?.unwrap_or_else(|| vec![0.0; offsets.len()]);
                if lengths.len() != offsets.len() || starts.len() != offsets.len() {
                    return Err(GeneratorError::Precondition(
                        "offsets, lengths and starts must have equal length".into(),
                    ));
                }
                let placements = offsets
                    .iter()
                    .zip(&lengths)
                    .zip(&starts)
                    .map(|((&offset, &length), &start)| Placement { offset, start, length })
                    .collect();
                GeneratorSpec::ParallelSegments { direction: Direction::new(kv.get_or("direction", 0.0)?), placements }
            }
            "lipschitz" | "lipschitz_graph" => GeneratorSpec::LipschitzGraph {
                lip: kv.require("lip")?,
                n_nodes: kv.get_or("nodes", 16)?,
                seed: kv.get_or("seed", 0)?,
            },
            "file" | "from_file" => GeneratorSpec::FromFile { path: kv.require::<String>("path")?.into() },
            other => return Err(ConfigError::Invalid(format!("unknown generator kind `{other}`")).into()),
        })
    }

    pub fn build(&self) -> Result<PlanarSet, GeneratorError> {
        match self {
            GeneratorSpec::Cantor4 { n } => cantor4(*n),
            GeneratorSpec::ParallelSegments { direction, placements } => parallel_segments(*direction, placements),
            GeneratorSpec::LipschitzGraph { lip, n_nodes, seed } => lipschitz_graph(*lip, *n_nodes, *seed),
            GeneratorSpec::FromFile { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| GeneratorError::Io { path: path.clone(), source })?;
                Ok(PlanarSet::from_json(&text)?)
            }
        }
    }
}

/// Rescales masses to total 1 and shrinks about the origin to diameter `√2`
/// when larger.
pub fn normalize(primitives: Vec<Primitive>) -> Result<PlanarSet, GeneratorError> {
    let raw = PlanarSet::new(primitives)?;
    let total = raw.total_mass();
    let shrink = if raw.diameter() > 2f64.sqrt() { 2f64.sqrt() / raw.diameter() } else { 1.0 };
    let out = raw
        .primitives()
        .iter()
        .map(|p| match *p {
            Primitive::Segment { a, b, mass } => Primitive::Segment { a: a * shrink, b: b * shrink, mass: mass / total },
            Primitive::Box { center, side, mass } => {
                Primitive::Box { center: center * shrink, side: side * shrink, mass: mass / total }
            }
        })
        .collect();
    Ok(PlanarSet::new(out)?)
}

/// The `n`-th iterate of the four-corner Cantor construction: `4ⁿ` boxes of
/// side `4⁻ⁿ`.
pub fn cantor4(n: u32) -> Result<PlanarSet, GeneratorError> {
    if !(1..=8).contains(&n) {
        return Err(GeneratorError::Precondition(format!("cantor4 needs 1 <= n <= 8, got {n}")));
    }
    let side = 0.25f64.powi(n as i32);
    let mut corners = vec![Point::new(0.0, 0.0)];
    let mut scale = 1.0;
    for _ in 0..n {
        let step = 0.75 * scale;
        corners = corners
            .iter()
            .flat_map(|&c| {
                [(0.0, 0.0), (step, 0.0), (0.0, step), (step, step)].map(|(dx, dy)| c + Point::new(dx, dy))
            })
            .collect();
        scale *= 0.25;
    }
    let mass = side;
    let prims = corners
        .into_iter()
        .map(|c| Primitive::Box { center: c + Point::new(side / 2.0, side / 2.0), side, mass })
        .collect();
    normalize(prims)
}

/// Segments parallel to `direction`; masses proportional to length.
pub fn parallel_segments(direction: Direction, placements: &[Placement]) -> Result<PlanarSet, GeneratorError> {
    if placements.is_empty() {
        return Err(GeneratorError::Precondition("need at least one segment".into()));
    }
    for p in placements {
        if !(p.length > 0.0 && p.length.is_finite() && p.offset.is_finite() && p.start.is_finite()) {
            return Err(GeneratorError::Precondition(format!("bad segment placement {p:?}")));
        }
    }
    for i in 0..placements.len() {
        for j in i + 1..placements.len() {
            let (a, b) = (placements[i], placements[j]);
            let same_line = (a.offset - b.offset).abs() <= GEOM_TOL;
            let meet = a.start <= b.start + b.length + GEOM_TOL && b.start <= a.start + a.length + GEOM_TOL;
            if same_line && meet {
                return Err(GeneratorError::Overlap(i, j));
            }
        }
    }
    let e = direction.unit();
    let n = direction.perp().unit();
    let prims = placements
        .iter()
        .map(|p| {
            let a = n * p.offset + e * p.start;
            Primitive::Segment { a, b: a + e * p.length, mass: p.length }
        })
        .collect();
    normalize(prims)
}

/// `parallel_segments` with every segment starting at `0` along the
/// direction.
pub fn parallel_segments_simple(
    direction: Direction,
    offsets: &[f64],
    lengths: &[f64],
) -> Result<PlanarSet, GeneratorError> {
    if offsets.len() != lengths.len() {
        return Err(GeneratorError::Precondition("offsets and lengths differ in count".into()));
    }
    let placements: Vec<Placement> =
        offsets.iter().zip(lengths).map(|(&offset, &length)| Placement { offset, start: 0.0, length }).collect();
    parallel_segments(direction, &placements)
}

/// Piecewise-linear graph over `[0, 1]` with `n_nodes` equally spaced nodes
/// and edge slopes drawn uniformly from `[−lip, lip]`.
pub fn lipschitz_graph(lip: f64, n_nodes: usize, seed: u64) -> Result<PlanarSet, GeneratorError> {
    if !(lip >= 0.0 && lip.is_finite()) {
        return Err(GeneratorError::Precondition(format!("lip must be finite and >= 0, got {lip}")));
    }
    if n_nodes < 2 {
        return Err(GeneratorError::Precondition("a graph needs at least 2 nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = 1.0 / (n_nodes - 1) as f64;
    let mut y = 0.0;
    let mut prims = Vec::with_capacity(n_nodes - 1);
    for i in 0..n_nodes - 1 {
        let slope: f64 = if lip > 0.0 { rng.gen_range(-lip..=lip) } else { 0.0 };
        let a = Point::new(i as f64 * dx, y);
        y += slope * dx;
        let b = Point::new((i + 1) as f64 * dx, y);
        prims.push(Primitive::Segment { a, b, mass: a.dist(b) });
    }
    normalize(prims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sets::projection_length;

    #[test]
    fn cantor_first_iterates() {
        let s = cantor4(1).unwrap();
        assert_eq!(s.primitives().len(), 4);
        for p in s.primitives() {
            match *p {
                Primitive::Box { side, mass, .. } => assert_eq!((side, mass), (0.25, 0.25)),
                _ => panic!("expected boxes"),
            }
        }
        assert_eq!(projection_length(&s, Direction::new(0.0)), 0.5);
        let s = cantor4(2).unwrap();
        assert_eq!(s.primitives().len(), 16);
        assert_eq!(projection_length(&s, Direction::new(0.0)), 0.25);
        assert!((s.diameter() - 2f64.sqrt()).abs() < 1e-12);
        assert!(cantor4(0).is_err());
        assert!(cantor4(9).is_err());
    }

    #[test]
    fn parallel_examples() {
        let s = parallel_segments_simple(Direction::new(0.0), &[0.0, 0.5], &[1.0, 1.0]).unwrap();
        assert_eq!(s.primitives().len(), 2);
        assert!(s.primitives().iter().all(|p| p.mass() == 0.5));
        let s = parallel_segments_simple(Direction::new(0.0), &[0.3], &[0.7]).unwrap();
        assert_eq!(s.primitives()[0].mass(), 1.0);
        let clash = [
            Placement { offset: 0.0, start: 0.0, length: 1.0 },
            Placement { offset: 0.0, start: 0.5, length: 1.0 },
        ];
        assert!(matches!(parallel_segments(Direction::new(0.0), &clash), Err(GeneratorError::Overlap(0, 1))));
    }

    #[test]
    fn lipschitz_examples() {
        let s = lipschitz_graph(0.0, 5, 1).unwrap();
        assert!(s.primitives().iter().all(|p| match *p {
            Primitive::Segment { a, b, .. } => a.y == 0.0 && b.y == 0.0,
            _ => false,
        }));
        let s = lipschitz_graph(1.0, 12, 7).unwrap();
        let nodes: Vec<Point> = s
            .primitives()
            .iter()
            .flat_map(|p| match *p {
                Primitive::Segment { a, b, .. } => [a, b],
                _ => unreachable!(),
            })
            .collect();
        for i in 0..nodes.len() {
            for j in 0..nodes.len() {
                let d = nodes[j] - nodes[i];
                if d.x.abs() > 1e-12 {
                    assert!((d.y / d.x).abs() <= 1.0 + 1e-12);
                }
            }
        }
        assert!(lipschitz_graph(1.0, 1, 7).is_err());
    }

    #[test]
    fn spec_from_config() {
        let kv = KeyValues::parse("kind = segments\noffsets = 0, 0.5\nlengths = 1, 1").unwrap();
        let s = GeneratorSpec::from_config(&kv).unwrap().build().unwrap();
        assert_eq!(s.primitives().len(), 2);
        let kv = KeyValues::parse("kind = cantor4\nn = 3").unwrap();
        assert_eq!(GeneratorSpec::from_config(&kv).unwrap().build().unwrap().primitives().len(), 64);
        let kv = KeyValues::parse("kind = spiral").unwrap();
        assert!(GeneratorSpec::from_config(&kv).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let a = lipschitz_graph(0.8, 20, 3).unwrap().to_json().unwrap();
        let b = lipschitz_graph(0.8, 20, 3).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }
}
