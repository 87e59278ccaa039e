//! Polarisation image formation, decomposition and inversion to candidate
//! surface normals.

pub mod candidates;
pub mod decompose;
pub mod dop;

pub use candidates::{candidates, CandidateField, CandidateStats, SLOTS};
pub use decompose::{canonical_phase, decompose, simulate_polariser_stack, Decomposition, PolarisationImage};
pub use dop::{
    dominance, dop_diffuse, dop_specular, invert_dop_diffuse, invert_dop_specular, max_dop_diffuse, ReflectanceKind,
    RefractiveIndex,
};
