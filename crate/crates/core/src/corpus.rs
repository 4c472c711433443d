//! Fixed corpora: the standard sets, engineered gap configurations and the
//! mutation base with its single-fault mutations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::generators::{cantor4, lipschitz_graph, normalize, parallel_segments, Placement};
use crate::geometry::{Direction, Point};
use crate::gaps::{point_inside_a, VerdictStatus};
use crate::pipeline::{
    avoided_directions, run_pipeline, FrozenGap, GSpec, PipelineError, RunOptions, RunOutcome, RunParams,
};
use crate::sets::{DiscreteMeasure, PlanarSet, Primitive};

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub name: String,
    pub set: PlanarSet,
    pub params: RunParams,
}

impl CorpusEntry {
    pub fn sample(&self) -> Result<DiscreteMeasure, PipelineError> {
        Ok(DiscreteMeasure::sample(&self.set, self.params.h)?)
    }

    pub fn run(&self, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
        let mu = self.sample()?;
        let g = self.params.g.resolve(&self.params, &self.set)?;
        run_pipeline(&self.name, &self.set, mu, g, &self.params, opts)
    }

    pub fn with_params(&self, params: RunParams) -> Self {
        CorpusEntry { params, ..self.clone() }
    }
}

fn segments(rows: &[(f64, f64, f64)]) -> Result<PlanarSet, PipelineError> {
    let placements: Vec<Placement> =
        rows.iter().map(|&(start, end, offset)| Placement { offset, start, length: end - start }).collect();
    parallel_segments(Direction::new(0.0), &placements).map_err(|e| PipelineError::Invalid(e.to_string()))
}

fn gen_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Invalid(e.to_string())
}

/// Three horizontal steps rising to the right.
pub fn staircase() -> Result<PlanarSet, PipelineError> {
    segments(&[(0.0, 0.25, 0.0), (0.35, 0.6, 0.2), (0.7, 0.95, 0.4)])
}

/// Parameters shared by the standard corpus: energies on both cone families
/// over four lattice levels.
pub fn standard_params() -> RunParams {
    RunParams {
        g: GSpec::JMinusEdge,
        depth: 4,
        h: 1.0 / 1500.0,
        with_j: true,
        delta: 16.0,
        ..RunParams::default()
    }
}

pub fn standard_corpus() -> Result<Vec<CorpusEntry>, PipelineError> {
    let base = standard_params();
    let unit_segment = PlanarSet::new(vec![Primitive::Segment {
        a: Point::new(0.0, 0.0),
        b: Direction::new(0.2).unit(),
        mass: 1.0,
    }])?;
    Ok(vec![
        CorpusEntry { name: "cantor4-n2".into(), set: cantor4(2).map_err(gen_err)?, params: RunParams { m: 5.0, ..base.clone() } },
        CorpusEntry { name: "cantor4-n3".into(), set: cantor4(3).map_err(gen_err)?, params: RunParams { m: 10.0, ..base.clone() } },
        CorpusEntry { name: "unit-segment".into(), set: unit_segment, params: RunParams { m: 4.0, delta: 4096.0, ..base.clone() } },
        CorpusEntry { name: "staircase".into(), set: staircase()?, params: base.clone() },
        CorpusEntry {
            name: "lipschitz-graph".into(),
            set: lipschitz_graph(0.5, 9, 7).map_err(gen_err)?,
            params: base,
        },
    ])
}

/// Parameters for the gap corpus: two lattice levels resolved finely enough
/// for every Bad cube to be verified.
pub fn gap_params() -> RunParams {
    RunParams { g: GSpec::J, depth: 2, with_j: false, ..RunParams::default() }
}

/// Target sample spacing for the gap corpus, below `ℓ(Q)/(64A)` on the
/// finest level.
pub const GAP_SPACING: f64 = 6.0e-5;

/// Horizontal segments in a random walk of vertical steps; horizontal gaps
/// exceed half the adjacent step so that no narrow vertical cone is hit.
pub fn gap_configuration(seed: u64) -> Result<PlanarSet, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let k = rng.gen_range(2..=4usize);
        let mut rows = Vec::with_capacity(k);
        let mut x = 0.0;
        let mut y = 0.0;
        for i in 0..k {
            let len = rng.gen_range(0.15..0.35);
            if i > 0 {
                let v: f64 = rng.gen_range(0.15..0.35);
                let g = v * rng.gen_range(0.5..2.0);
                y += if rng.gen_bool(0.5) { v } else { -v };
                x += g;
            }
            rows.push((x, x + len, y));
            x += len;
        }
        let set = segments(&rows)?;
        if set.diameter() < 1.35 {
            return Ok(set);
        }
    }
}

pub fn gap_corpus(n: usize) -> Result<Vec<CorpusEntry>, PipelineError> {
    (0..n as u64)
        .map(|seed| {
            let set = gap_configuration(seed)?;
            let length = segment_length(&set);
            let params = RunParams { h: GAP_SPACING / length, seed, ..gap_params() };
            Ok(CorpusEntry { name: format!("gap-{seed:02}"), set, params })
        })
        .collect()
}

/// Total length of the segment primitives.
pub fn segment_length(set: &PlanarSet) -> f64 {
    set.primitives()
        .iter()
        .map(|p| match *p {
            Primitive::Segment { a, b, .. } => a.dist(b),
            Primitive::Box { .. } => 0.0,
        })
        .sum()
}

/// The staircase with `G = J` and the graph check enabled.
pub fn mutation_base() -> Result<CorpusEntry, PipelineError> {
    let set = staircase()?;
    let params = RunParams { g: GSpec::J, graph: true, h: 8e-5, ..gap_params() };
    Ok(CorpusEntry { name: "mutation-base".into(), set, params })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// A sample point inside a verified `𝒜`, checked against the frozen trace.
    IntrudeA,
    /// A point directly above the sample.
    VerticalPair,
    /// Extra mass on a short horizontal interval.
    DensitySpike,
    /// `G` loses a quarter of `J`.
    GBelowWindow,
    /// A fourth segment whose chords cross the stale `G_T`.
    ExtraSegment,
}

impl Mutation {
    pub const ALL: [Mutation; 5] =
        [Mutation::IntrudeA, Mutation::VerticalPair, Mutation::DensitySpike, Mutation::GBelowWindow, Mutation::ExtraSegment];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::IntrudeA => "intrude-a",
            Mutation::VerticalPair => "vertical-pair",
            Mutation::DensitySpike => "density-spike",
            Mutation::GBelowWindow => "g-below-window",
            Mutation::ExtraSegment => "extra-segment",
        }
    }

    /// The checker expected to fail, and no other.
    pub fn target(self) -> &'static str {
        match self {
            Mutation::IntrudeA => "gap_lemma",
            Mutation::VerticalPair => "empty_cones",
            Mutation::DensitySpike => "density",
            Mutation::GBelowWindow => "g_window",
            Mutation::ExtraSegment => "graph",
        }
    }
}

#[derive(Debug)]
pub struct MutationOutcome {
    pub mutation: Mutation,
    pub failures: Vec<&'static str>,
    pub outcome: RunOutcome,
}

impl MutationOutcome {
    /// The first failing checker is the target.
    pub fn caught(&self) -> bool {
        self.failures.first() == Some(&self.mutation.target())
    }

    pub fn isolated(&self) -> bool {
        self.failures == [self.mutation.target()]
    }
}

fn mean_weight(mu: &DiscreteMeasure) -> f64 {
    mu.total() / mu.len() as f64
}

/// Applies `m` to the base run and reruns every checker.
pub fn run_mutation(base: &CorpusEntry, base_run: &RunOutcome, m: Mutation) -> Result<MutationOutcome, PipelineError> {
    let stale_g_t = avoided_directions(&base.set, base.params.spectrum_h, base.params.g_depth)?;
    let mut opts = RunOptions { graph_g_t: Some(stale_g_t), frozen: None };
    let w = mean_weight(&base_run.mu);
    let mut params = base.params.clone();
    let mut set = base.set.clone();
    let mu = match m {
        Mutation::IntrudeA => {
            let passing: Vec<_> =
                base_run.verdicts.iter().filter(|v| v.status == VerdictStatus::Pass).cloned().collect();
            let p = passing
                .iter()
                .find_map(point_inside_a)
                .ok_or_else(|| PipelineError::Invalid("base run has no verified Bad cube".into()))?;
            opts.frozen = Some(FrozenGap { lattice: base_run.lattice.clone(), verdicts: passing });
            base_run.mu.with_points(&[(p, w)])?
        }
        Mutation::VerticalPair => {
            let pts = base_run.mu.points();
            let mut xs: Vec<usize> = (0..pts.len()).collect();
            xs.sort_by(|&a, &b| pts[a].x.total_cmp(&pts[b].x));
            let p = pts[xs[xs.len() / 2]];
            base_run.mu.with_points(&[(p + Point::new(0.0, 0.15), w)])?
        }
        Mutation::DensitySpike => {
            let pts = base_run.mu.points();
            let left = pts.iter().copied().min_by(|a, b| a.x.total_cmp(&b.x)).expect("nonempty sample");
            let k = 600;
            let extra: Vec<(Point, f64)> =
                (0..k).map(|i| (left + Point::new(0.1 + 1e-3 * i as f64 / k as f64, 0.0), w)).collect();
            base_run.mu.with_points(&extra)?
        }
        Mutation::GBelowWindow => {
            params.g = GSpec::JMinusFraction(0.25);
            base_run.mu.clone()
        }
        Mutation::ExtraSegment => {
            let mut prims = base.set.primitives().to_vec();
            let l = 0.2;
            let a = Point::new(-0.3, 0.35);
            prims.push(Primitive::Segment { a, b: a + Point::new(l, 0.0), mass: l });
            set = normalize(prims).map_err(gen_err)?;
            DiscreteMeasure::sample(&set, params.h)?
        }
    };
    let g = params.g.resolve(&params, &set)?;
    let outcome = run_pipeline(&format!("{}+{}", base.name, m.name()), &set, mu, g, &params, &opts)?;
    Ok(MutationOutcome { mutation: m, failures: outcome.failures(), outcome })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CHECKS;

    #[test]
    fn gap_configurations_are_reproducible_staircases() {
        for seed in 0..10 {
            let a = gap_configuration(seed).unwrap();
            assert_eq!(a, gap_configuration(seed).unwrap());
            assert!(a.diameter() < 1.35);
            let n = a.primitives().len();
            assert!((2..=4).contains(&n));
            for p in a.primitives() {
                let Primitive::Segment { a, b, .. } = *p else { panic!("box in a gap configuration") };
                assert!((a.y - b.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mutations_target_distinct_checks() {
        let mut targets: Vec<&str> = Mutation::ALL.iter().map(|m| m.target()).collect();
        assert!(targets.iter().all(|t| CHECKS.contains(t)));
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), Mutation::ALL.len());
    }

    #[test]
    fn corpora_have_expected_sizes() {
        assert_eq!(standard_corpus().unwrap().len(), 5);
        let gaps = gap_corpus(3).unwrap();
        assert_eq!(gaps.len(), 3);
        for e in &gaps {
            assert!((e.params.h * segment_length(&e.set) - GAP_SPACING).abs() < 1e-15);
        }
    }
}
