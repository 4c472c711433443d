//! Dyadic intervals on the circle, fixed-depth direction-set bitsets, the
//! enlargement `G ↦ G*` and its iteration driver.
//!
//! All measures of direction sets are integer cell counts at a fixed depth
//! `D`; every inequality involving `ε` or `s` is decided in exact rational
//! arithmetic, using the fact that a finite `f64` is itself a dyadic rational.

use std::cmp::Ordering;
use std::fmt;

use bitvec::prelude::*;
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AngleInterval, Direction, Point};

/// Largest supported bitset depth.
pub const MAX_DEPTH: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DirectionError {
    #[error("depth {0} exceeds the supported maximum {MAX_DEPTH}")]
    DepthTooLarge(u32),
    #[error("index {index} out of range at depth {depth}")]
    IndexOutOfRange { depth: u32, index: u64 },
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("interval at depth {interval} is finer than the bitset depth {bits}")]
    DepthExhausted { interval: u32, bits: u32 },
    #[error("postcondition failed: {0}")]
    PostconditionFailed(String),
    #[error("iteration exceeded its bound of {0} steps")]
    BoundExceeded(u64),
    #[error("malformed direction-set text: {0}")]
    Parse(String),
}

/// `[j·2⁻ᵏ, (j+1)·2⁻ᵏ)` with `k = depth`, `j = index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicInterval {
    pub depth: u32,
    pub index: u64,
}

impl DyadicInterval {
    pub fn new(depth: u32, index: u64) -> Result<Self, DirectionError> {
        if depth > 63 {
            return Err(DirectionError::DepthTooLarge(depth));
        }
        if index >= 1u64 << depth {
            return Err(DirectionError::IndexOutOfRange { depth, index });
        }
        Ok(DyadicInterval { depth, index })
    }

    /// `[0, 1)`.
    pub const fn root() -> Self {
        DyadicInterval { depth: 0, index: 0 }
    }

    pub fn parent(self) -> Option<Self> {
        (self.depth > 0).then(|| DyadicInterval { depth: self.depth - 1, index: self.index / 2 })
    }

    pub fn sibling(self) -> Self {
        DyadicInterval { depth: self.depth, index: self.index ^ 1 }
    }

    pub fn children(self) -> [Self; 2] {
        let d = self.depth + 1;
        [
            DyadicInterval { depth: d, index: 2 * self.index },
            DyadicInterval { depth: d, index: 2 * self.index + 1 },
        ]
    }

    pub fn start(self) -> f64 {
        self.index as f64 / (1u64 << self.depth) as f64
    }

    pub fn end(self) -> f64 {
        (self.index + 1) as f64 / (1u64 << self.depth) as f64
    }

    pub fn measure(self) -> f64 {
        1.0 / (1u64 << self.depth) as f64
    }

    pub fn midpoint(self) -> Direction {
        Direction::new(0.5 * (self.start() + self.end()))
    }

    /// `other ⊆ self`.
    pub fn contains(self, other: DyadicInterval) -> bool {
        other.depth >= self.depth && (other.index >> (other.depth - self.depth)) == self.index
    }

    /// Cell index range covered at bitset depth `d ≥ self.depth`.
    pub fn cells(self, d: u32) -> std::ops::Range<usize> {
        let shift = d - self.depth;
        let lo = (self.index << shift) as usize;
        lo..lo + (1usize << shift)
    }
}

impl fmt::Display for DyadicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}/2^{}, {}/2^{})", self.index, self.depth, self.index + 1, self.depth)
    }
}

/// A union of depth-`D` dyadic cells of `T`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct DirectionSet {
    depth: u32,
    bits: BitVec<u64, Lsb0>,
}

impl fmt::Debug for DirectionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DirectionSet({})", self.to_text())
    }
}

impl DirectionSet {
    pub fn empty(depth: u32) -> Result<Self, DirectionError> {
        if depth > MAX_DEPTH {
            return Err(DirectionError::DepthTooLarge(depth));
        }
        Ok(DirectionSet { depth, bits: bitvec![u64, Lsb0; 0; 1usize << depth] })
    }

    pub fn full(depth: u32) -> Result<Self, DirectionError> {
        let mut s = Self::empty(depth)?;
        s.bits.fill(true);
        Ok(s)
    }

    pub fn from_cells(depth: u32, cells: impl IntoIterator<Item = usize>) -> Result<Self, DirectionError> {
        let mut s = Self::empty(depth)?;
        for c in cells {
            if c >= s.len() {
                return Err(DirectionError::IndexOutOfRange { depth, index: c as u64 });
            }
            s.bits.set(c, true);
        }
        Ok(s)
    }

    pub fn from_intervals(
        depth: u32,
        intervals: impl IntoIterator<Item = DyadicInterval>,
    ) -> Result<Self, DirectionError> {
        let mut s = Self::empty(depth)?;
        for i in intervals {
            if i.depth > depth {
                return Err(DirectionError::DepthExhausted { interval: i.depth, bits: depth });
            }
            s.bits[i.cells(depth)].fill(true);
        }
        Ok(s)
    }

    /// Cells whose midpoint lies in the arc; exact when the arc endpoints
    /// are multiples of `2⁻ᴰ`.
    pub fn from_angle_interval(arc: &AngleInterval, depth: u32) -> Result<Self, DirectionError> {
        let mut s = Self::empty(depth)?;
        let n = s.len();
        for c in 0..n {
            let mid = Direction::new((c as f64 + 0.5) / n as f64);
            if mid.distance(arc.center) < arc.halfwidth {
                s.bits.set(c, true);
            }
        }
        Ok(s)
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Number of cells, `2ᴰ`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Popcount.
    pub fn count(&self) -> u64 {
        self.bits.count_ones() as u64
    }

    /// `popcount · 2⁻ᴰ`.
    pub fn measure(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }

    pub fn contains_cell(&self, c: usize) -> bool {
        self.bits[c]
    }

    pub fn set_cell(&mut self, c: usize, value: bool) {
        self.bits.set(c, value);
    }

    pub fn cell_of(&self, theta: Direction) -> usize {
        ((theta.turns() * self.len() as f64) as usize).min(self.len() - 1)
    }

    pub fn contains(&self, theta: Direction) -> bool {
        self.bits[self.cell_of(theta)]
    }

    /// Whether the line spanned by `v ≠ 0` has a direction in the set, i.e.
    /// `θ ∈ S` or `θ + 1/2 ∈ S` for `θ = arg v`.
    pub fn contains_line(&self, v: Point) -> bool {
        let c = self.cell_of(Direction::of_vector(v));
        let half = self.len() / 2;
        self.bits[c] || (half > 0 && self.bits[(c + half) % self.len()])
    }

    /// Number of set cells inside a dyadic interval of depth `≤ D`.
    pub fn count_in(&self, i: DyadicInterval) -> u64 {
        self.bits[i.cells(self.depth)].count_ones() as u64
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn complement(&self) -> Self {
        DirectionSet { depth: self.depth, bits: !self.bits.clone() }
    }

    /// # Panics
    /// If the depths differ.
    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.depth, other.depth, "direction-set depth mismatch");
        DirectionSet { depth: self.depth, bits: self.bits.clone() | other.bits.clone() }
    }

    /// # Panics
    /// If the depths differ.
    pub fn intersection(&self, other: &Self) -> Self {
        assert_eq!(self.depth, other.depth, "direction-set depth mismatch");
        DirectionSet { depth: self.depth, bits: self.bits.clone() & other.bits.clone() }
    }

    /// `self \ other`.
    pub fn difference(&self, other: &Self) -> Self {
        self.intersection(&other.complement())
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.difference(other).is_empty()
    }

    /// Rotation by `turns`, a multiple of `2⁻ᴰ` (rounded to the nearest cell).
    pub fn rotate_cells(&self, cells: usize) -> Self {
        let mut bits = self.bits.clone();
        bits.rotate_right(cells % self.len());
        DirectionSet { depth: self.depth, bits }
    }

    /// `S + 1/4`; requires `D ≥ 2`.
    pub fn rotate_quarter(&self) -> Result<Self, DirectionError> {
        if self.depth < 2 {
            return Err(DirectionError::PreconditionViolation("quarter turn needs depth >= 2".into()));
        }
        Ok(self.rotate_cells(self.len() / 4))
    }

    /// The set closed under `θ ↦ θ + 1/2`.
    pub fn symmetrized(&self) -> Self {
        if self.depth == 0 {
            return self.clone();
        }
        self.union(&self.rotate_cells(self.len() / 2))
    }

    /// Smallest arc of line directions (directions modulo `1/2`) covering the
    /// set, as `(center, halfwidth)`; `None` when the set is empty.
    pub fn line_hull(&self) -> Option<(Direction, f64)> {
        if self.is_empty() {
            return None;
        }
        if self.depth == 0 {
            return Some((Direction::new(0.0), 0.25));
        }
        let half = self.len() / 2;
        let occupied: Vec<bool> = (0..half).map(|c| self.bits[c] || self.bits[c + half]).collect();
        // Longest circular run of empty cells on the half circle.
        let mut best = (0usize, 0usize);
        let mut c = 0;
        while c < 2 * half {
            if occupied[c % half] {
                c += 1;
                continue;
            }
            let start = c;
            while c < start + half && !occupied[c % half] {
                c += 1;
            }
            if c - start > best.1 {
                best = (start % half, c - start);
            }
        }
        let cell = 1.0 / self.len() as f64;
        let covered = (half - best.1) as f64 * cell;
        let first = (best.0 + best.1) % half;
        let center = Direction::new(first as f64 * cell + covered / 2.0);
        Some((center, covered / 2.0))
    }

    /// Maximal dyadic intervals contained in the set.
    pub fn maximal_intervals(&self) -> Vec<DyadicInterval> {
        let mut out = Vec::new();
        self.collect_maximal(DyadicInterval::root(), &mut |i, s| s.count_in(i) == i.cells(s.depth).len() as u64, &mut out);
        out
    }

    fn collect_maximal(
        &self,
        i: DyadicInterval,
        pred: &mut dyn FnMut(DyadicInterval, &Self) -> bool,
        out: &mut Vec<DyadicInterval>,
    ) {
        if self.count_in(i) == 0 {
            return;
        }
        if pred(i, self) {
            out.push(i);
        } else if i.depth < self.depth {
            for c in i.children() {
                self.collect_maximal(c, pred, out);
            }
        }
    }

    /// `"depth=D;hex=…"`, one hex digit per four cells, the first cell of each
    /// group in the most significant bit.
    pub fn to_text(&self) -> String {
        let mut hex = String::with_capacity(self.len() / 4 + 1);
        for chunk in self.bits.chunks(4) {
            let mut nib = 0u32;
            for (k, b) in chunk.iter().enumerate() {
                if *b {
                    nib |= 8 >> k;
                }
            }
            hex.push(char::from_digit(nib, 16).unwrap_or('0'));
        }
        format!("depth={};hex={}", self.depth, hex)
    }

    pub fn from_text(text: &str) -> Result<Self, DirectionError> {
        let bad = || DirectionError::Parse(text.to_string());
        let text = text.trim();
        let (d, h) = text.split_once(';').ok_or_else(bad)?;
        let depth: u32 = d.strip_prefix("depth=").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let hex = h.strip_prefix("hex=").ok_or_else(bad)?;
        let mut s = Self::empty(depth)?;
        if hex.len() != s.len().div_ceil(4) {
            return Err(bad());
        }
        for (g, ch) in hex.chars().enumerate() {
            let nib = ch.to_digit(16).ok_or_else(bad)?;
            for k in 0..4 {
                let c = 4 * g + k;
                if nib & (8 >> k) != 0 {
                    if c >= s.len() {
                        return Err(bad());
                    }
                    s.bits.set(c, true);
                }
            }
        }
        Ok(s)
    }
}

/// Exact comparison of `factor·a` with `b` for finite `factor ≥ 0`.
pub fn cmp_scaled(a: u64, factor: f64, b: u64) -> Ordering {
    assert!(factor.is_finite() && factor >= 0.0, "factor must be finite and nonnegative");
    if factor == 0.0 || a == 0 {
        return 0u64.cmp(&b);
    }
    let bits = factor.to_bits();
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    let (m, e) = if exp_bits == 0 { (frac, -1074) } else { (frac | (1u64 << 52), exp_bits - 1075) };
    // factor·a = m·a·2^e
    let lhs = m as u128 * a as u128;
    let rhs = b as u128;
    if e >= 0 {
        let e = e as u32;
        if e < lhs.leading_zeros() {
            return (lhs << e).cmp(&rhs);
        }
        return (BigUint::from(lhs) << e).cmp(&BigUint::from(rhs));
    }
    let k = (-e) as u32;
    if k < rhs.leading_zeros() {
        return lhs.cmp(&(rhs << k));
    }
    BigUint::from(lhs).cmp(&(BigUint::from(rhs) << k))
}

/// `count ≥ (1 − ε)·size` for integers, exactly.
fn dense_enough(count: u64, size: u64, eps: f64) -> bool {
    count >= size || cmp_scaled(size, eps, size - count) != Ordering::Less
}

/// Record of one enlargement step.
#[derive(Clone, Debug, PartialEq)]
pub struct EnlargementTrace {
    pub j: DyadicInterval,
    pub g_in: DirectionSet,
    /// Maximal dyadic `I ⊆ J` with `ℋ(I ∩ G) ≥ (1−ε)ℋ(I)`.
    pub i_family: Vec<DyadicInterval>,
    /// Maximal elements among the parents of `i_family`.
    pub i_star: Vec<DyadicInterval>,
    pub g_out: DirectionSet,
    /// Maximal dyadic intervals in `J \ G_in`.
    pub b_delta_in: Vec<DyadicInterval>,
    /// Maximal dyadic intervals in `J \ G_out`.
    pub b_delta_out: Vec<DyadicInterval>,
}

impl EnlargementTrace {
    /// Re-checks `G_in ⊆ G_out ⊆ J`, the `(1+ε)` growth and `ℬ_{Δ,*} ⊆ ℬ_Δ`.
    pub fn verify(&self, eps: f64) -> Result<(), DirectionError> {
        let j_set = DirectionSet::from_intervals(self.g_in.depth(), [self.j])?;
        if !self.g_in.is_subset(&self.g_out) {
            return Err(DirectionError::PostconditionFailed("G_in not contained in G_out".into()));
        }
        if !self.g_out.is_subset(&j_set) {
            return Err(DirectionError::PostconditionFailed("G_out leaves J".into()));
        }
        let (cin, cout) = (self.g_in.count(), self.g_out.count());
        if cout < cin || cmp_scaled(cin, eps, cout - cin) == Ordering::Greater {
            return Err(DirectionError::PostconditionFailed(format!(
                "measure growth: {cout} cells < (1+{eps})·{cin}"
            )));
        }
        for b in &self.b_delta_out {
            if !self.b_delta_in.contains(b) {
                return Err(DirectionError::PostconditionFailed(format!("gap {b} of G_out is new")));
            }
        }
        for w in self.i_star.windows(2) {
            if w[0].contains(w[1]) || w[1].contains(w[0]) {
                return Err(DirectionError::PostconditionFailed("I* not disjoint".into()));
            }
        }
        Ok(())
    }
}

/// Maximal dyadic intervals in `J \ G`.
pub fn maximal_gaps(j: DyadicInterval, g: &DirectionSet) -> Result<Vec<DyadicInterval>, DirectionError> {
    if j.depth > g.depth() {
        return Err(DirectionError::DepthExhausted { interval: j.depth, bits: g.depth() });
    }
    let mut out = Vec::new();
    gaps_rec(j, g, &mut out);
    Ok(out)
}

fn gaps_rec(i: DyadicInterval, g: &DirectionSet, out: &mut Vec<DyadicInterval>) {
    let c = g.count_in(i);
    if c == 0 {
        out.push(i);
    } else if (c as usize) < i.cells(g.depth()).len() {
        for ch in i.children() {
            gaps_rec(ch, g, out);
        }
    }
}

fn check_inside(j: DyadicInterval, g: &DirectionSet) -> Result<(), DirectionError> {
    if j.depth > g.depth() {
        return Err(DirectionError::DepthExhausted { interval: j.depth, bits: g.depth() });
    }
    if g.count_in(j) != g.count() {
        return Err(DirectionError::PreconditionViolation("G is not contained in J".into()));
    }
    Ok(())
}

/// One enlargement step `G ↦ G*`.
pub fn enlarge(j: DyadicInterval, g: &DirectionSet, eps: f64) -> Result<EnlargementTrace, DirectionError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DirectionError::PreconditionViolation(format!("eps = {eps} outside (0,1)")));
    }
    check_inside(j, g)?;
    let size = j.cells(g.depth()).len() as u64;
    let count = g.count();
    if count == 0 || dense_enough(count, size, eps) {
        return Err(DirectionError::PreconditionViolation(format!(
            "need 0 < H(G) < (1-eps)H(J); have {count}/{size} cells, eps = {eps}"
        )));
    }

    let mut i_family = Vec::new();
    dense_rec(j, g, eps, &mut i_family);

    let mut parents: Vec<DyadicInterval> = i_family.iter().filter_map(|i| i.parent()).collect();
    parents.sort();
    parents.dedup();
    let mut i_star: Vec<DyadicInterval> = parents
        .iter()
        .copied()
        .filter(|p| !parents.iter().any(|q| q != p && q.contains(*p)))
        .collect();
    i_star.sort_by_key(|i| (i.start().to_bits(), i.depth));

    let g_out = DirectionSet::from_intervals(g.depth(), i_star.iter().copied())?.union(g);
    let trace = EnlargementTrace {
        j,
        g_in: g.clone(),
        b_delta_in: maximal_gaps(j, g)?,
        b_delta_out: maximal_gaps(j, &g_out)?,
        i_family,
        i_star,
        g_out,
    };
    trace.verify(eps)?;
    Ok(trace)
}

fn dense_rec(i: DyadicInterval, g: &DirectionSet, eps: f64, out: &mut Vec<DyadicInterval>) {
    let c = g.count_in(i);
    if c == 0 {
        return;
    }
    if dense_enough(c, i.cells(g.depth()).len() as u64, eps) {
        out.push(i);
    } else if i.depth < g.depth() {
        for ch in i.children() {
            dense_rec(ch, g, eps, out);
        }
    }
}

/// Result of [`iterate_enlargement`].
#[derive(Clone, Debug)]
pub struct Iteration {
    pub traces: Vec<EnlargementTrace>,
    pub k0: u64,
    pub bound: u64,
    pub g_final: DirectionSet,
}

/// `⌈log((1−ε)·4/s) / log(1+ε)⌉`, clamped at 0.
pub fn iteration_bound(eps: f64, s: f64) -> u64 {
    let v = ((1.0 - eps) * 4.0 / s).ln() / (1.0 + eps).ln();
    if v <= 0.0 { 0 } else { v.ceil() as u64 }
}

/// Applies [`enlarge`] until `ℋ(G_k) ≥ (1−ε)ℋ(J₀)`.
pub fn iterate_enlargement(
    j0: DyadicInterval,
    g0: &DirectionSet,
    eps: f64,
    s: f64,
) -> Result<Iteration, DirectionError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(DirectionError::PreconditionViolation(format!("s = {s} must be positive")));
    }
    check_inside(j0, g0)?;
    let size = j0.cells(g0.depth()).len() as u64;
    if cmp_scaled(size, s, 4 * g0.count()) == Ordering::Greater {
        return Err(DirectionError::PreconditionViolation(format!(
            "need H(G0) >= (s/4)H(J0); have {}/{size} cells, s = {s}",
            g0.count()
        )));
    }
    let bound = iteration_bound(eps, s);
    let mut g = g0.clone();
    let mut traces = Vec::new();
    while !dense_enough(g.count(), size, eps) {
        if traces.len() as u64 >= bound {
            return Err(DirectionError::BoundExceeded(bound));
        }
        let t = enlarge(j0, &g, eps)?;
        g = t.g_out.clone();
        traces.push(t);
    }
    Ok(Iteration { k0: traces.len() as u64, traces, bound, g_final: g })
}
