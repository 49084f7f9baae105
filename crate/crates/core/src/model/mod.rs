//! Genome-driven transformer reconstruction models.
//!
//! The embedding width is twice the feature count, so every attention head
//! (one per feature) is two columns wide.

pub mod checkpoint;
mod encoding;
mod genome;
mod network;

pub use encoding::positional_encoding;
pub use genome::{ranges, AttentionKind, Gene, Genome, PhaseType, PosEncoding};
pub use network::{
    multi_head_attention, parameter_count_formula, AnomalyModel, AttentionVars, Context, Reconstructions,
    RunningStats, NORM_EPS, STATS_MOMENTUM,
};
