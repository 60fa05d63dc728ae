//! Serialized decode traces and the model files that reproduce them.

use serde::{Deserialize, Serialize};

use super::{AttentionConfig, AttentionError, DecodeState, ModelWeights, SelectionResult, Selector, VariantKind};
use crate::numerics::{normal_from, stream_rng, Matrix};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadTrace {
    pub kv_head: usize,
    /// One entry per decode step, in order; `steps[i].step == i + 1`.
    pub steps: Vec<SelectionResult>,
}

/// Ordered per-step selections of one decode run, with enough metadata to
/// re-derive them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub format_version: u32,
    pub seed: u64,
    pub config: AttentionConfig,
    pub variant: VariantKind,
    pub selector: Selector,
    pub heads: Vec<HeadTrace>,
}

/// Weights plus the hidden-state inputs fed to the decoder, one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub seed: u64,
    pub config: AttentionConfig,
    pub variant: VariantKind,
    pub weights: ModelWeights,
    pub inputs: Matrix,
}

impl ModelFile {
    pub fn random(cfg: &AttentionConfig, variant: VariantKind, seed: u64, steps: usize) -> Self {
        let weights = ModelWeights::random(cfg, variant, seed);
        let inputs = normal_from(&mut stream_rng(seed, 1), steps, cfg.d);
        Self {
            format_version: TRACE_FORMAT_VERSION,
            seed,
            config: cfg.clone(),
            variant,
            weights,
            inputs,
        }
    }

    /// Runs every input row through a fresh decoder, keeping selections only.
    pub fn run(&self, selector: Selector) -> Result<DecodeTrace, AttentionError> {
        let mut state = DecodeState::new(self.config.clone(), self.weights.clone())?;
        let mut heads: Vec<HeadTrace> = (0..self.config.n_kv_head)
            .map(|kv_head| HeadTrace {
                kv_head,
                steps: Vec::with_capacity(self.inputs.rows()),
            })
            .collect();
        for row in self.inputs.iter_rows() {
            let out = state.decode_step(row, selector, false)?;
            for (h, sel) in heads.iter_mut().zip(out.selections) {
                h.steps.push(sel);
            }
        }
        Ok(DecodeTrace {
            format_version: TRACE_FORMAT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            variant: self.variant,
            selector,
            heads,
        })
    }
}

/// Seeded model and its decode trace over `steps` tokens.
pub fn generate_trace(
    cfg: &AttentionConfig,
    variant: VariantKind,
    selector: Selector,
    seed: u64,
    steps: usize,
) -> Result<(ModelFile, DecodeTrace), AttentionError> {
    cfg.validate()?;
    let model = ModelFile::random(cfg, variant, seed, steps.min(cfg.n));
    let trace = model.run(selector)?;
    Ok((model, trace))
}

/// Re-decodes `model` and checks every step of `trace` against it.
pub fn replay_trace(model: &ModelFile, trace: &DecodeTrace) -> Result<(), AttentionError> {
    let fresh = model.run(trace.selector)?;
    for (a, b) in fresh.heads.iter().zip(&trace.heads) {
        let n = a.steps.len().max(b.steps.len());
        for i in 0..n {
            if a.steps.get(i) != b.steps.get(i) {
                return Err(AttentionError::ReplayMismatch {
                    step: i + 1,
                    kv_head: a.kv_head,
                });
            }
        }
    }
    if fresh.heads.len() != trace.heads.len() {
        return Err(AttentionError::ReplayMismatch {
            step: 0,
            kv_head: fresh.heads.len().min(trace.heads.len()),
        });
    }
    Ok(())
}
