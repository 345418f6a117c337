//! Diagnostics: how far any rank-`D` feature map must sit from the
//! exponential kernel, and how memory collisions corrupt pairs stored in the
//! hidden state.

mod collision;
mod gram;

pub use crate::scoring::{
    aggregate_alt_score, alt_score, alt_score_attnerr_abs, alt_score_attnerr_sq, alt_score_overestimate,
};
pub use collision::{
    collision_matrices, collision_matrix, relative_collision_matrix, Cell, CollisionMatrix, MemoryPolicy,
};
pub use gram::{
    approximation_error, gram_matrix, gram_study_cell, rank_study, study_inputs, truncated_errors, GramStudyResult,
    ScaleRule,
};
