//! A learning-to-rank toolkit built around listwise context re-ranking.
//!
//! The pipeline: parse LETOR-format query-document features, produce an
//! initial ranking with a linear pairwise ranker (or import scores from an
//! external ranker), re-rank the top-n list with a GRU-encoded listwise
//! context model trained under ListMLE, SoftRank, or Attention Rank, and
//! evaluate with NDCG/ERR plus Fisher randomization significance tests and
//! negative-pair analysis.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod trainer;

pub use autograd::{global_norm_clip, GradError, Graph, Tensor, Var};
pub use data::{DataError, LetorData, QueryGroup, RankedInput, ScoreMap};
pub use losses::LossKind;
pub use metrics::EvalReport;
pub use models::{ModelKind, ModelParams};
pub use trainer::{TrainConfig, TrainOutput};

/// Derive a stream-specific seed from the run seed and a fixed tag, so each
/// consumer of randomness gets an independent, reproducible stream.
pub(crate) fn sub_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(23)
}
