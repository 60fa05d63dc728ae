//! Overlap between consecutive selections, the locality floor check and the
//! eviction (no-readmission) check.
//!
//! Locality is measured at block granularity over the blocks picked by
//! top-k. A top-k block counts as reused when it was attended at the
//! previous step, whether it was picked by top-k then or was still part of
//! the sliding window. This is the set the fast tier holds between steps,
//! so `1 - gamma` is the fraction of top-k blocks that must be fetched.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    candidate_blocks, AttentionConfig, AttentionError, DecodeTrace, ModelFile, SelectionResult,
    Selector, VariantKind,
};

#[derive(Debug, Error)]
pub enum LocalityError {
    #[error("overlap ratio of an empty selection is undefined")]
    EmptySelection,
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("csv output: {0}")]
    Io(#[from] std::io::Error),
}

/// `|prev ∩ cur| / |cur|`.
pub fn gamma<T: Eq + Hash>(prev: &[T], cur: &[T]) -> Result<f64, LocalityError> {
    if cur.is_empty() {
        return Err(LocalityError::EmptySelection);
    }
    let prev: HashSet<&T> = prev.iter().collect();
    let cur: HashSet<&T> = cur.iter().collect();
    let hits = cur.iter().filter(|x| prev.contains(*x)).count();
    Ok(hits as f64 / cur.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGamma {
    pub step: usize,
    pub kv_head: usize,
    /// Top-k blocks at this step that were attended at the previous step.
    pub reused: usize,
    /// Top-k blocks at this step.
    pub selected: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub per_step: Vec<StepGamma>,
    /// Minimum over `per_step`; 1 when no step selected anything.
    pub min_gamma: f64,
    pub mean_gamma: f64,
    /// `None` for baselines, which carry no guarantee.
    pub bound: Option<f64>,
    pub violations: Vec<StepGamma>,
}

impl LocalityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<&StepGamma> {
        self.violations.first()
    }

    /// CSV with header `step,kv_head,gamma,bound`; `bound` is empty for
    /// baseline reports.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), LocalityError> {
        writeln!(out, "step,kv_head,gamma,bound")?;
        let bound = self.bound.map(|b| b.to_string()).unwrap_or_default();
        for s in &self.per_step {
            writeln!(out, "{},{},{},{}", s.step, s.kv_head, s.gamma, bound)?;
        }
        Ok(())
    }
}

/// Overlap series for one head. `bound` is the exact floor
/// `(numerator, denominator)`; violations are decided in integers.
pub fn locality_series(
    steps: &[SelectionResult],
    kv_head: usize,
    bound: Option<(usize, usize)>,
) -> (Vec<StepGamma>, Vec<StepGamma>) {
    let mut series = Vec::new();
    let mut violations = Vec::new();
    for pair in steps.windows(2) {
        let prev: HashSet<usize> = pair[0].attended_blocks().into_iter().collect();
        let cur = pair[1].topk_blocks();
        if cur.is_empty() {
            continue;
        }
        let reused = cur.iter().filter(|b| prev.contains(b)).count();
        let g = StepGamma {
            step: pair[1].step,
            kv_head,
            reused,
            selected: cur.len(),
            gamma: reused as f64 / cur.len() as f64,
        };
        if let Some((num, den)) = bound {
            if reused * den < num * cur.len() {
                violations.push(g.clone());
            }
        }
        series.push(g);
    }
    (series, violations)
}

fn report(trace: &DecodeTrace, bound: Option<(usize, usize)>) -> LocalityReport {
    let mut per_step = Vec::new();
    let mut violations = Vec::new();
    for head in &trace.heads {
        let (s, v) = locality_series(&head.steps, head.kv_head, bound);
        per_step.extend(s);
        violations.extend(v);
    }
    per_step.sort_by_key(|s| (s.step, s.kv_head));
    violations.sort_by_key(|s| (s.step, s.kv_head));
    let min_gamma = per_step.iter().map(|s| s.gamma).fold(1.0, f64::min);
    let mean_gamma = if per_step.is_empty() {
        1.0
    } else {
        per_step.iter().map(|s| s.gamma).sum::<f64>() / per_step.len() as f64
    };
    LocalityReport {
        per_step,
        min_gamma,
        mean_gamma,
        bound: bound.map(|(n, d)| if d == 0 { 1.0 } else { n as f64 / d as f64 }),
        violations,
    }
}

/// Checks `gamma(t) >= k_e_topk / (k_q + k_e_topk)` at every step of a
/// locality-constrained trace.
pub fn verify_locality_bound(trace: &DecodeTrace) -> LocalityReport {
    report(trace, Some(trace.config.locality_bound_ratio()))
}

/// Same overlap series without asserting any floor.
pub fn baseline_locality(trace: &DecodeTrace) -> LocalityReport {
    report(trace, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Readmission {
    pub block: usize,
    /// Step at which the block was a candidate but not selected.
    pub evicted_at: usize,
    /// Later step at which it was selected again.
    pub readmitted_at: usize,
}

/// Checks that the query-agnostic sets never re-admit a block: for all
/// `t1 < t2`, `blocks_e(t2) ⊆ blocks_e(t1) ∪ (candidates(t2) \ candidates(t1))`.
///
/// Equivalent to the pairwise statement: a block violates it iff it was a
/// candidate left out at some step and is selected later.
pub fn eviction_monotone_check(
    steps: &[SelectionResult],
    cfg: &AttentionConfig,
) -> Result<(), Readmission> {
    let mut evicted: HashMap<usize, usize> = HashMap::new();
    for sel in steps {
        for &b in &sel.blocks_e {
            if let Some(&t1) = evicted.get(&b) {
                return Err(Readmission {
                    block: b,
                    evicted_at: t1,
                    readmitted_at: sel.step,
                });
            }
        }
        for b in candidate_blocks(sel.step, cfg) {
            if !sel.blocks_e.contains(&b) {
                evicted.entry(b).or_insert(sel.step);
            }
        }
    }
    Ok(())
}

/// Mean and minimum overlap of one synthetic layer under both selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLocality {
    pub layer: usize,
    pub seed: u64,
    pub nosa_mean: f64,
    pub nosa_min: f64,
    pub baseline_mean: f64,
    pub baseline_min: f64,
    pub bound: f64,
    pub violations: usize,
}

/// Per-layer locality with an independent random model per layer. Both
/// selectors see the same weights and inputs.
pub fn layer_sweep(
    cfg: &AttentionConfig,
    variant: VariantKind,
    layers: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<LayerLocality>, LocalityError> {
    cfg.validate().map_err(AttentionError::from)?;
    (0..layers)
        .into_par_iter()
        .map(|layer| {
            let layer_seed = seed.wrapping_mul(1_000_003).wrapping_add(layer as u64);
            let model = ModelFile::random(cfg, variant, layer_seed, steps.min(cfg.n));
            let nosa = verify_locality_bound(&model.run(Selector::Nosa)?);
            let base = baseline_locality(&model.run(Selector::InfLlmV2)?);
            Ok(LayerLocality {
                layer,
                seed: layer_seed,
                nosa_mean: nosa.mean_gamma,
                nosa_min: nosa.min_gamma,
                baseline_mean: base.mean_gamma,
                baseline_min: base.min_gamma,
                bound: nosa.bound.unwrap_or(1.0),
                violations: nosa.violations.len(),
            })
        })
        .collect()
}
