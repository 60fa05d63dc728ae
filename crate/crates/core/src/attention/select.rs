//! Block compression, selection scores, the two selection rules and mask
//! construction.
//!
//! Block layout at context length `t` (tokens `0..t`, the query is token
//! `t - 1`):
//!
//! * fixed blocks: the sink blocks, every block touching the last `n_w`
//!   positions, and the block holding the current token;
//! * candidates: every other block. Candidates are always complete and
//!   their compressed scores never change afterwards.
//!
//! Only candidates compete in top-k selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AttentionConfig, AttentionError};
use crate::numerics::{dot, topk_of, Matrix, NumericsError, ScoreVector};

/// Which selection rule produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selector {
    /// Query-aware top-`k_q` plus query-agnostic top-`k_e` over the rest.
    #[serde(rename = "nosa")]
    Nosa,
    /// Query-aware top-k only (the unconstrained baseline).
    #[serde(rename = "infllmv2")]
    InfLlmV2,
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Selector::Nosa => "nosa",
            Selector::InfLlmV2 => "infllmv2",
        })
    }
}

impl FromStr for Selector {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nosa" => Ok(Selector::Nosa),
            "infllmv2" | "infllm-v2" => Ok(Selector::InfLlmV2),
            _ => Err(AttentionError::UnknownSelector(s.to_string())),
        }
    }
}

/// Sorted, disjoint half-open token ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSet(Vec<(usize, usize)>);

impl TokenSet {
    /// Expands sorted block indices into token ranges clipped to `0..t`.
    pub fn from_blocks(blocks: &[usize], n_b: usize, t: usize) -> Self {
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for &b in blocks {
            let start = b * n_b;
            let end = ((b + 1) * n_b).min(t);
            if start >= end {
                continue;
            }
            match ranges.last_mut() {
                Some(last) if last.1 == start => last.1 = end,
                _ => ranges.push((start, end)),
            }
        }
        Self(ranges)
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|(a, b)| b - a).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.0.iter().any(|&(a, b)| (a..b).contains(&token))
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().flat_map(|&(a, b)| a..b)
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().map(|&(_, b)| b - 1)
    }
}

/// Outcome of one selection step for one KV head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Context length `t` at this step.
    pub step: usize,
    pub blocks_q: Vec<usize>,
    pub blocks_e: Vec<usize>,
    pub blocks_fixed: Vec<usize>,
    pub gamma_tokens: TokenSet,
}

impl SelectionResult {
    fn assemble(
        step: usize,
        blocks_q: Vec<usize>,
        blocks_e: Vec<usize>,
        blocks_fixed: Vec<usize>,
        n_b: usize,
    ) -> Self {
        let mut all: Vec<usize> = blocks_q
            .iter()
            .chain(&blocks_e)
            .chain(&blocks_fixed)
            .copied()
            .collect();
        all.sort_unstable();
        let gamma_tokens = TokenSet::from_blocks(&all, n_b, step);
        Self {
            step,
            blocks_q,
            blocks_e,
            blocks_fixed,
            gamma_tokens,
        }
    }

    /// Blocks picked by top-k (both sides), ascending.
    pub fn topk_blocks(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.blocks_q.iter().chain(&self.blocks_e).copied().collect();
        v.sort_unstable();
        v
    }

    /// Every attended block, ascending.
    pub fn attended_blocks(&self) -> Vec<usize> {
        let mut v = self.topk_blocks();
        v.extend_from_slice(&self.blocks_fixed);
        v.sort_unstable();
        v
    }
}

pub fn block_count(t: usize, n_b: usize) -> usize {
    t.div_ceil(n_b)
}

/// Sink, window and current-token blocks at context length `t`.
pub fn fixed_blocks(t: usize, cfg: &AttentionConfig) -> Vec<usize> {
    let nb = block_count(t, cfg.n_b);
    if nb == 0 {
        return Vec::new();
    }
    let mut fixed: Vec<usize> = (0..cfg.sink_blocks().min(nb)).collect();
    let window_start = t.saturating_sub(cfg.n_w.max(1)) / cfg.n_b;
    for b in window_start..nb {
        if b >= cfg.sink_blocks() {
            fixed.push(b);
        }
    }
    fixed
}

/// Blocks eligible for top-k at context length `t`.
pub fn candidate_blocks(t: usize, cfg: &AttentionConfig) -> Vec<usize> {
    let nb = block_count(t, cfg.n_b);
    let sink = cfg.sink_blocks();
    let window_start = t.saturating_sub(cfg.n_w.max(1)) / cfg.n_b;
    (sink..window_start.min(nb)).collect()
}

/// Mean of rows `[j*n_b, min((j+1)*n_b, t))` for every block `j`.
pub fn compress_blocks(x: &Matrix, n_b: usize) -> Result<Matrix, AttentionError> {
    if n_b == 0 {
        return Err(AttentionError::ZeroBlockSize);
    }
    let nb = block_count(x.rows(), n_b);
    let mut out = Matrix::zeros(nb, x.cols());
    for j in 0..nb {
        let lo = j * n_b;
        let hi = ((j + 1) * n_b).min(x.rows());
        block_mean_into(x, lo, hi, out.row_mut(j));
    }
    Ok(out)
}

/// Row mean over `lo..hi`, summed in row order then divided once.
pub(crate) fn block_mean_into(x: &Matrix, lo: usize, hi: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in lo..hi {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let count = (hi - lo) as f64;
    out.iter_mut().for_each(|o| *o /= count);
}

/// Same block mean for a score vector.
pub fn compress_scores(s: &[f64], n_b: usize) -> Result<ScoreVector, AttentionError> {
    if n_b == 0 {
        return Err(AttentionError::ZeroBlockSize);
    }
    Ok(ScoreVector(
        s.chunks(n_b)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect(),
    ))
}

/// One dot product per compressed key row.
pub fn query_block_scores(q: &[f64], k_c: &Matrix) -> Result<ScoreVector, AttentionError> {
    if q.len() != k_c.cols() {
        return Err(NumericsError::Shape {
            op: "query_block_scores",
            lhs: (1, q.len()),
            rhs: k_c.shape(),
        }
        .into());
    }
    Ok(ScoreVector(k_c.iter_rows().map(|r| dot(q, r)).collect()))
}

fn check_scores(name: &'static str, s: &[f64], t: usize, cfg: &AttentionConfig) -> Result<(), AttentionError> {
    if t == 0 {
        return Err(AttentionError::EmptyContext);
    }
    let want = block_count(t, cfg.n_b);
    if s.len() != want {
        return Err(AttentionError::ScoreLength {
            name,
            got: s.len(),
            want,
        });
    }
    for b in candidate_blocks(t, cfg) {
        if !s[b].is_finite() {
            return Err(AttentionError::NonFiniteScore { name, block: b });
        }
    }
    Ok(())
}

/// Locality-constrained selection. `s_q` and `s_e` hold one score per
/// block of the context (entries for fixed blocks are ignored).
///
/// Query-aware blocks are the top `k_q / n_b` candidates by `s_q`; the
/// query-agnostic side takes the top `k_e_topk / n_b` of the remaining
/// candidates by `s_e`. Short contexts simply select every candidate.
pub fn nosa_select(
    s_q: &[f64],
    s_e: &[f64],
    t: usize,
    cfg: &AttentionConfig,
) -> Result<SelectionResult, AttentionError> {
    check_scores("s_q", s_q, t, cfg)?;
    check_scores("s_e", s_e, t, cfg)?;
    let candidates = candidate_blocks(t, cfg);
    let blocks_q = topk_of(s_q, candidates.clone(), cfg.query_blocks());
    let rest: Vec<usize> = candidates
        .into_iter()
        .filter(|b| blocks_q.binary_search(b).is_err())
        .collect();
    let blocks_e = topk_of(s_e, rest, cfg.agnostic_blocks());
    Ok(SelectionResult::assemble(
        t,
        blocks_q,
        blocks_e,
        fixed_blocks(t, cfg),
        cfg.n_b,
    ))
}

/// Baseline selection: the whole top-k budget goes to query scores.
pub fn infllmv2_select(
    s_q: &[f64],
    t: usize,
    cfg: &AttentionConfig,
) -> Result<SelectionResult, AttentionError> {
    check_scores("s_q", s_q, t, cfg)?;
    let blocks_q = topk_of(s_q, candidate_blocks(t, cfg), cfg.topk_blocks());
    Ok(SelectionResult::assemble(
        t,
        blocks_q,
        Vec::new(),
        fixed_blocks(t, cfg),
        cfg.n_b,
    ))
}

pub fn select(
    selector: Selector,
    s_q: &[f64],
    s_e: &[f64],
    t: usize,
    cfg: &AttentionConfig,
) -> Result<SelectionResult, AttentionError> {
    match selector {
        Selector::Nosa => nosa_select(s_q, s_e, t, cfg),
        Selector::InfLlmV2 => infllmv2_select(s_q, t, cfg),
    }
}

/// Additive mask over positions `0..t`: `0` where attended, `-inf` elsewhere.
pub fn build_token_mask(
    sel: &SelectionResult,
    t: usize,
) -> Result<ScoreVector, AttentionError> {
    if sel.step != t {
        return Err(AttentionError::StepMismatch {
            selection: sel.step,
            requested: t,
        });
    }
    let mut mask = vec![f64::NEG_INFINITY; t];
    for j in sel.gamma_tokens.iter() {
        mask[j] = 0.0;
    }
    Ok(ScoreVector(mask))
}
