//! Block-sparse decoding attention with query-aware and query-agnostic
//! block selection.

mod attend;
mod config;
mod decode;
mod eviction;
mod select;
mod trace;

pub use attend::{attend_biased, dense_oracle};
pub use config::{AttentionConfig, BudgetAccounting, ConfigError};
pub use decode::{project_qkv, DecodeState, HeadState, ModelWeights, Projection, StepOutput};
pub use eviction::{EvictionHead, Nonlinearity, VariantKind};
pub use select::{
    block_count, build_token_mask, candidate_blocks, compress_blocks, compress_scores,
    fixed_blocks, infllmv2_select, nosa_select, query_block_scores, select, SelectionResult,
    Selector, TokenSet,
};
pub use trace::{generate_trace, replay_trace, DecodeTrace, HeadTrace, ModelFile, TRACE_FORMAT_VERSION};

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown eviction-head variant `{0}` (expected retaining, dma, ed-dma or s-dma)")]
    UnknownVariant(String),
    #[error("unknown selector `{0}` (expected nosa or infllmv2)")]
    UnknownSelector(String),
    #[error("block size must be positive")]
    ZeroBlockSize,
    #[error("selection needs at least one token of context")]
    EmptyContext,
    #[error("{name} has {got} block scores, expected {want}")]
    ScoreLength {
        name: &'static str,
        got: usize,
        want: usize,
    },
    #[error("{name} is not finite at candidate block {block}")]
    NonFiniteScore { name: &'static str, block: usize },
    #[error("selection was made at step {selection}, mask requested for step {requested}")]
    StepMismatch { selection: usize, requested: usize },
    #[error("every position is masked")]
    AllMasked,
    #[error("DMA bias must be non-negative, got {0}")]
    NegativeMultiplicativeBias(f64),
    #[error("context is full: n = {0}")]
    ContextFull(usize),
    #[error("replay diverged at step {step}, kv head {kv_head}")]
    ReplayMismatch { step: usize, kv_head: usize },
}
