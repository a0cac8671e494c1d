//! Training objectives.
//!
//! Each loss has a graph-building form (used inside training steps, returns a
//! [`crate::tensor::Var`]) and, where evaluation code needs plain numbers, a
//! thin wrapper that builds a throwaway graph — one implementation serves
//! both paths, so the value the optimizer sees is the value tests check.

pub mod clip;
pub mod distill;
pub mod maskreg;
pub mod spatial_align;

pub use clip::{clamp_logit_scale, clip_loss, clip_loss_graph, score_matrix, LogitScale, ScoreMatrix};
pub use distill::{
    distill_loss, distill_loss_graph, similarity_distributions, similarity_distributions_graph,
    teacher_scale,
};
pub use maskreg::{duplicated_count, mask_cosine_loss_graph, sample_block_mask, MaskRegSpec};
pub use spatial_align::{
    core_align_loss, core_align_loss_graph, locality_loss, locality_loss_graph, pairwise_cossim,
    pairwise_cossim_graph, teacher_sim_transform,
};
