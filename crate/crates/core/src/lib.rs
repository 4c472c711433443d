//! Executable machinery for quantitative projection theorems on planar
//! AD-regular sets: projections and Favard length, dyadic direction sets,
//! anisotropic cube lattices, conical energies with a corona decomposition,
//! and the gap-finding lemma for leftist rectangles.

pub mod directions;
pub mod geometry;
pub mod sets;
pub mod config;
pub mod generators;
pub mod lattice;
pub mod energy;
pub mod gaps;
pub mod svg;
pub mod pipeline;
pub mod corpus;
