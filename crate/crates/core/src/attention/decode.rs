//! Projection weights, per-head KV state and the single-token decode step.

use serde::{Deserialize, Serialize};

use super::select::{block_count, block_mean_into, build_token_mask, select};
use super::{
    attend_biased, query_block_scores, AttentionConfig, AttentionError, EvictionHead,
    SelectionResult, Selector, VariantKind,
};
use crate::numerics::{matmul, normal_from, stream_rng, vecmat, Matrix, NumericsError, ScoreVector};

/// Per-head projections of a hidden-state matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// One `n x d_head` matrix per query head.
    pub q: Vec<Matrix>,
    /// One `n x d_head` matrix per KV head.
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// `Q = H W_Q`, `K = H W_K`, `V = H W_V`, split into heads. Query head `h`
/// reads KV head `h / (n_head / n_kv_head)`.
pub fn project_qkv(
    h: &Matrix,
    w_q: &Matrix,
    w_k: &Matrix,
    w_v: &Matrix,
    cfg: &AttentionConfig,
) -> Result<Projection, AttentionError> {
    let dh = cfg.d_head;
    let expect = [
        (w_q, cfg.n_head * dh, "w_q"),
        (w_k, cfg.n_kv_head * dh, "w_k"),
        (w_v, cfg.n_kv_head * dh, "w_v"),
    ];
    for (w, cols, op) in expect {
        if w.rows() != cfg.d || w.cols() != cols || h.cols() != cfg.d {
            return Err(NumericsError::Shape {
                op,
                lhs: h.shape(),
                rhs: w.shape(),
            }
            .into());
        }
    }
    let split = |m: Matrix, heads: usize| -> Result<Vec<Matrix>, AttentionError> {
        (0..heads)
            .map(|i| m.column_slice(i * dh, dh).map_err(Into::into))
            .collect()
    };
    Ok(Projection {
        q: split(matmul(h, w_q)?, cfg.n_head)?,
        k: split(matmul(h, w_k)?, cfg.n_kv_head)?,
        v: split(matmul(h, w_v)?, cfg.n_kv_head)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// `d x (n_head * d_head)`
    pub w_q: Matrix,
    /// `d x (n_kv_head * d_head)`
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// One eviction head per KV head.
    pub eviction: Vec<EvictionHead>,
}

impl ModelWeights {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, drawn from `seed`.
    pub fn random(cfg: &AttentionConfig, variant: VariantKind, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0);
        let mut scaled = |rows: usize, cols: usize| {
            let mut m = normal_from(&mut rng, rows, cols);
            let s = 1.0 / (rows as f64).sqrt();
            for i in 0..rows {
                m.row_mut(i).iter_mut().for_each(|x| *x *= s);
            }
            m
        };
        let w_q = scaled(cfg.d, cfg.n_head * cfg.d_head);
        let w_k = scaled(cfg.d, cfg.n_kv_head * cfg.d_head);
        let w_v = scaled(cfg.d, cfg.n_kv_head * cfg.d_head);
        let input = if variant.reads_hidden() { cfg.d } else { cfg.d_head };
        let hidden = cfg.n_head;
        let eviction = (0..cfg.n_kv_head)
            .map(|_| {
                let w1 = scaled(input, hidden);
                let w2 = scaled(hidden, 1);
                EvictionHead::new(variant, w1, w2).expect("shapes are consistent by construction")
            })
            .collect();
        Self {
            w_q,
            w_k,
            w_v,
            eviction,
        }
    }

    pub fn variant(&self) -> Option<VariantKind> {
        self.eviction.first().map(|e| e.kind)
    }
}

/// KV cache of one KV head plus its compressed views.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub k: Matrix,
    pub v: Matrix,
    /// Block means of `k`; the last row covers a possibly partial block.
    pub k_c: Matrix,
    /// Per-token importance scores.
    pub s_e: Vec<f64>,
    /// Block means of `s_e`.
    pub s_e_c: Vec<f64>,
}

impl HeadState {
    pub fn new(d_head: usize) -> Self {
        Self {
            k: Matrix::with_cols(d_head),
            v: Matrix::with_cols(d_head),
            k_c: Matrix::with_cols(d_head),
            s_e: Vec::new(),
            s_e_c: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }

    /// Appends one token and refreshes the compressed row of its block.
    pub fn append(&mut self, k: &[f64], v: &[f64], s_e: f64, n_b: usize) -> Result<(), AttentionError> {
        self.k.push_row(k)?;
        self.v.push_row(v)?;
        self.s_e.push(s_e);
        let t = self.k.rows();
        let block = (t - 1) / n_b;
        let lo = block * n_b;
        if block == self.k_c.rows() {
            self.k_c.push_row(&vec![0.0; self.k.cols()])?;
            self.s_e_c.push(0.0);
        }
        block_mean_into(&self.k, lo, t, self.k_c.row_mut(block));
        let tail = &self.s_e[lo..t];
        self.s_e_c[block] = tail.iter().sum::<f64>() / tail.len() as f64;
        Ok(())
    }

    /// Bias vector over tokens: each token carries its block's compressed
    /// importance score.
    pub fn token_bias(&self, n_b: usize) -> Vec<f64> {
        (0..self.len()).map(|j| self.s_e_c[j / n_b]).collect()
    }
}

/// Artifacts of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// One selection per KV head, shared by its query group.
    pub selections: Vec<SelectionResult>,
    /// One attention output per query head; empty when outputs were skipped.
    pub outputs: Vec<ScoreVector>,
}

/// Incremental decoder for a single sequence.
#[derive(Debug, Clone)]
pub struct DecodeState {
    cfg: AttentionConfig,
    weights: ModelWeights,
    heads: Vec<HeadState>,
}

impl DecodeState {
    pub fn new(cfg: AttentionConfig, weights: ModelWeights) -> Result<Self, AttentionError> {
        cfg.validate()?;
        if weights.eviction.len() != cfg.n_kv_head {
            return Err(NumericsError::Shape {
                op: "eviction heads",
                lhs: (weights.eviction.len(), 1),
                rhs: (cfg.n_kv_head, 1),
            }
            .into());
        }
        let heads = (0..cfg.n_kv_head).map(|_| HeadState::new(cfg.d_head)).collect();
        Ok(Self { cfg, weights, heads })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.cfg
    }

    pub fn heads(&self) -> &[HeadState] {
        &self.heads
    }

    /// Tokens currently cached.
    pub fn len(&self) -> usize {
        self.heads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Consumes the hidden state of the next token and attends from it.
    ///
    /// The token's own K/V row is appended first, so at context length `t`
    /// the cache holds positions `0..t` and the query is position `t - 1`.
    /// With `compute_outputs == false` only the selections are produced.
    pub fn decode_step(
        &mut self,
        hidden: &[f64],
        selector: Selector,
        compute_outputs: bool,
    ) -> Result<StepOutput, AttentionError> {
        let cfg = &self.cfg;
        if self.len() >= cfg.n {
            return Err(AttentionError::ContextFull(cfg.n));
        }
        let dh = cfg.d_head;
        let q_all = vecmat(hidden, &self.weights.w_q)?;
        let k_all = vecmat(hidden, &self.weights.w_k)?;
        let v_all = vecmat(hidden, &self.weights.w_v)?;

        for (g, head) in self.heads.iter_mut().enumerate() {
            let k = &k_all[g * dh..(g + 1) * dh];
            let v = &v_all[g * dh..(g + 1) * dh];
            let s_e = self.weights.eviction[g].score_token(v, hidden)?;
            head.append(k, v, s_e, cfg.n_b)?;
        }

        let t = self.len();
        let group = cfg.group_size();
        let mut selections = Vec::with_capacity(cfg.n_kv_head);
        let mut outputs = Vec::new();
        for (g, head) in self.heads.iter().enumerate() {
            let mut s_q = vec![0.0; block_count(t, cfg.n_b)];
            for h in g * group..(g + 1) * group {
                let q = &q_all[h * dh..(h + 1) * dh];
                for (acc, s) in s_q.iter_mut().zip(query_block_scores(q, &head.k_c)?.iter()) {
                    *acc += s;
                }
            }
            let sel = select(selector, &s_q, &head.s_e_c, t, cfg)?;
            if compute_outputs {
                let mask = build_token_mask(&sel, t)?;
                let bias = head.token_bias(cfg.n_b);
                let variant = self.weights.eviction[g].kind;
                for h in g * group..(g + 1) * group {
                    let q = &q_all[h * dh..(h + 1) * dh];
                    outputs.push(attend_biased(q, &head.k, &head.v, &mask, &bias, variant)?);
                }
            }
            selections.push(sel);
        }
        Ok(StepOutput {
            selections,
            outputs,
        })
    }
}
