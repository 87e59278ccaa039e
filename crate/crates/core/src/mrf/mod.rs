//! Joint disambiguation of candidate normals and the diffuse/specular mask.

pub mod bp;
pub mod costs;
pub mod disambiguate;
pub mod exact;
pub mod graph;

pub use bp::{solve_bp, BpConfig, BpResult};
pub use costs::{initial_specular_mask, pairwise_cost, ternary_cost, unary_cost};
pub use disambiguate::{build_graph, disambiguate, update_mask, Disambiguation, LabelField, MrfProblem};
pub use graph::{FactorGraph, MismatchRule, MrfWeights, BIG, STATES};
