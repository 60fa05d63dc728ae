//! Offloading cost model and trace-driven decode simulator.
//!
//! Per-step latency is an additive roofline: a fixed overhead, one read of
//! the weights from the fast tier, fast-tier reads of the resident part of
//! the attended KV blocks and slow-tier transfers of the missing part.
//! [`simulate_decode`] produces the miss counts by running block selection
//! on synthetic block scores and feeding the required blocks through a
//! [`KvBlockManager`].

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    block_count, infllmv2_select, nosa_select, AttentionConfig, AttentionError, DecodeTrace,
    SelectionResult,
};
use crate::kvcache::{BlockKey, KvBlockManager, ManagerError, NullMover, PhysicalLayout, Tier};
use crate::numerics::stream_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("cost parameter `{field}` = {value} is out of range")]
    InvalidParam { field: &'static str, value: f64 },
    #[error("byte counts must be finite and non-negative (attended {attended}, miss {miss})")]
    InvalidBytes { attended: f64, miss: f64 },
    #[error("miss bytes {miss} exceed attended bytes {attended}")]
    MissExceedsAttended { attended: f64, miss: f64 },
    #[error("hit rate {0} is outside [0, 1]")]
    HitRateOutOfRange(f64),
    #[error("unknown policy `{0}` (expected nosa, infllmv2-offload or infllmv2-resident)")]
    UnknownPolicy(String),
    #[error("invalid simulation setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModelParams {
    /// Fast-tier bandwidth, bytes/s.
    pub bw_fast: f64,
    /// Slow-tier (host link) bandwidth, bytes/s.
    pub bw_slow: f64,
    /// Peak compute, FLOP/s. Validated but not part of the closed form.
    pub flops: f64,
    /// Weight bytes read once per step.
    pub param_bytes: f64,
    pub fixed_overhead_s: f64,
    /// Fraction of slow-tier transfer time hidden behind other work.
    pub overlap: f64,
}

impl CostModelParams {
    /// A100-class device with a PCIe 4.0 x16 host link, serving a
    /// 1B-parameter model in 16-bit weights.
    pub fn a100_class() -> Self {
        Self {
            bw_fast: 2.0e12,
            bw_slow: 31.5e9,
            flops: 312.0e12,
            param_bytes: 2.4e9,
            fixed_overhead_s: 0.04,
            overlap: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (field, value) in [
            ("bw_fast", self.bw_fast),
            ("bw_slow", self.bw_slow),
            ("flops", self.flops),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::InvalidParam { field, value });
            }
        }
        for (field, value) in [
            ("param_bytes", self.param_bytes),
            ("fixed_overhead_s", self.fixed_overhead_s),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(SimError::InvalidParam { field, value });
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(SimError::InvalidParam {
                field: "overlap",
                value: self.overlap,
            });
        }
        Ok(())
    }
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self::a100_class()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub t_weights: f64,
    pub t_attn_fast: f64,
    pub t_attn_slow: f64,
    pub t_total: f64,
    pub attn_ratio: f64,
}

/// Latency of one decode step for `batch` sequences, each attending
/// `attended_bytes` of KV of which `miss_bytes` come from the slow tier.
pub fn step_cost(
    batch: usize,
    attended_bytes: f64,
    miss_bytes: f64,
    params: &CostModelParams,
) -> Result<StepCost, SimError> {
    params.validate()?;
    if !(attended_bytes.is_finite() && miss_bytes.is_finite() && attended_bytes >= 0.0 && miss_bytes >= 0.0) {
        return Err(SimError::InvalidBytes {
            attended: attended_bytes,
            miss: miss_bytes,
        });
    }
    if miss_bytes > attended_bytes {
        return Err(SimError::MissExceedsAttended {
            attended: attended_bytes,
            miss: miss_bytes,
        });
    }
    let b = batch as f64;
    let t_weights = params.param_bytes / params.bw_fast;
    let t_attn_fast = b * (attended_bytes - miss_bytes) / params.bw_fast;
    let t_attn_slow = b * miss_bytes / params.bw_slow;
    let attn = t_attn_fast + (1.0 - params.overlap) * t_attn_slow;
    let t_total = params.fixed_overhead_s + t_weights + attn;
    Ok(StepCost {
        t_weights,
        t_attn_fast,
        t_attn_slow,
        t_total,
        attn_ratio: if t_total > 0.0 { attn / t_total } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub hit_rate: f64,
    pub tokens_per_s: f64,
}

/// Modeled throughput `B / t_total` with `miss = (1 - h) * attended`.
pub fn throughput_curve(
    hit_rates: &[f64],
    batch: usize,
    attended_bytes: f64,
    params: &CostModelParams,
) -> Result<Vec<CurvePoint>, SimError> {
    hit_rates
        .iter()
        .map(|&h| {
            if !(0.0..=1.0).contains(&h) {
                return Err(SimError::HitRateOutOfRange(h));
            }
            let cost = step_cost(batch, attended_bytes, (1.0 - h) * attended_bytes, params)?;
            Ok(CurvePoint {
                hit_rate: h,
                tokens_per_s: batch as f64 / cost.t_total,
            })
        })
        .collect()
}

/// `n + 1` evenly spaced hit rates from 0 to 1.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n.max(1) as f64).collect()
}

pub fn write_curve_csv<W: Write>(points: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "hit_rate,tokens_per_s")?;
    for p in points {
        writeln!(out, "{},{}", p.hit_rate, p.tokens_per_s)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "nosa")]
    Nosa,
    #[serde(rename = "infllmv2-offload")]
    InfLlmV2Offload,
    #[serde(rename = "infllmv2-resident")]
    InfLlmV2Resident,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Nosa, Policy::InfLlmV2Offload, Policy::InfLlmV2Resident];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Nosa => "nosa",
            Policy::InfLlmV2Offload => "infllmv2-offload",
            Policy::InfLlmV2Resident => "infllmv2-resident",
        }
    }

    pub fn offloads(self) -> bool {
        self != Policy::InfLlmV2Resident
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| SimError::UnknownPolicy(s.to_string()))
    }
}

/// Whole-model KV geometry for byte accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_kv_head: usize,
    pub d_head: usize,
    /// Bytes per cached element.
    pub element_width: usize,
}

impl ModelShape {
    pub fn bytes_per_block(&self, n_b: usize) -> u64 {
        2 * (n_b * self.d_head * self.element_width) as u64
    }
}

/// Full KV cache of `batch` sequences of length `n`, all layers.
pub fn resident_footprint(shape: &ModelShape, batch: usize, n: usize) -> u64 {
    2 * (batch * n * shape.d_head * shape.n_kv_head * shape.element_width * shape.n_layers) as u64
}

/// Fast tier of `fast_blocks_per_head` slots per KV head, all layers.
pub fn offload_footprint(shape: &ModelShape, fast_blocks_per_head: usize, n_b: usize) -> u64 {
    (fast_blocks_per_head * shape.n_kv_head * shape.n_layers) as u64 * shape.bytes_per_block(n_b)
}

/// Decode-loop setup shared by every policy of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// `n` is the context length reached at the last measured step.
    pub attention: AttentionConfig,
    pub n_layers: usize,
    pub element_width: usize,
    /// Measured decode steps.
    pub steps: usize,
    /// Unmeasured steps run first so the fast tier is warm.
    pub warmup: usize,
    /// Lag-one correlation of successive queries.
    pub query_drift: f64,
    /// Width of the synthetic compressed keys and queries.
    pub score_dim: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            n_layers: self.n_layers,
            n_kv_head: self.attention.n_kv_head,
            d_head: self.attention.d_head,
            element_width: self.element_width,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.attention.validate().map_err(AttentionError::from)?;
        if self.n_layers == 0 || self.score_dim == 0 || self.steps == 0 {
            return Err(SimError::Setup("n_layers, score_dim and steps must be positive".into()));
        }
        if !matches!(self.element_width, 2 | 4) {
            return Err(SimError::Setup(format!(
                "element_width must be 2 or 4, got {}",
                self.element_width
            )));
        }
        if !(0.0..=1.0).contains(&self.query_drift) {
            return Err(SimError::Setup(format!(
                "query_drift must lie in [0, 1], got {}",
                self.query_drift
            )));
        }
        if self.steps + self.warmup >= self.attention.n {
            return Err(SimError::Setup(format!(
                "steps + warmup = {} leaves no prefill below n = {}",
                self.steps + self.warmup,
                self.attention.n
            )));
        }
        Ok(())
    }

    /// Fast-tier slots per sequence and KV head. Offloading keeps one slot
    /// beyond the largest attended set, so a newly created block never
    /// displaces a block attended at the previous step.
    pub fn fast_blocks_per_seq(&self, policy: Policy) -> usize {
        if policy.offloads() {
            self.attention.max_attended_blocks() + 1
        } else {
            block_count(self.attention.n, self.attention.n_b)
        }
    }

    /// Largest batch whose KV footprint fits in `budget` bytes.
    pub fn batch_for_budget(&self, policy: Policy, budget: u64) -> usize {
        let per_seq = if policy.offloads() {
            offload_footprint(&self.shape(), self.fast_blocks_per_seq(policy), self.attention.n_b)
        } else {
            resident_footprint(&self.shape(), 1, self.attention.n)
        };
        (budget / per_seq.max(1)) as usize
    }

    pub fn memory_footprint(&self, policy: Policy, batch: usize) -> u64 {
        if policy.offloads() {
            offload_footprint(
                &self.shape(),
                batch * self.fast_blocks_per_seq(policy),
                self.attention.n_b,
            )
        } else {
            resident_footprint(&self.shape(), batch, self.attention.n)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub batch: usize,
    pub n: usize,
    /// KV bytes held in the fast tier.
    pub memory_bytes: u64,
    pub steps: usize,
    /// Fraction of required blocks already fast-resident.
    pub hit_rate: f64,
    pub tokens_per_s: f64,
    pub mean_step_s: f64,
    pub attn_ratio: f64,
    /// Whole-model bytes moved, slow to fast.
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Largest number of top-k blocks fetched for one sequence and head in
    /// one step.
    pub max_topk_fetch: usize,
}

struct SeqHead {
    keys: Vec<Vec<f64>>,
    s_e: Vec<f64>,
    query: Vec<f64>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs `cfg.warmup + cfg.steps` decode steps of `batch` sequences.
///
/// Every sequence and KV head gets fixed random compressed block keys and
/// block importance scores; queries follow an AR(1) process with lag-one
/// correlation `query_drift`. The random draws do not depend on `policy`,
/// so all policies see the same workload.
pub fn simulate_decode(
    cfg: &SimConfig,
    policy: Policy,
    batch: usize,
    params: &CostModelParams,
) -> Result<SimReport, SimError> {
    cfg.validate()?;
    params.validate()?;
    if batch == 0 {
        return Err(SimError::Setup("batch must be positive".into()));
    }
    let a = &cfg.attention;
    let heads = a.n_kv_head;
    let fast = PhysicalLayout {
        tier: Tier::Fast,
        n_num: batch * cfg.fast_blocks_per_seq(policy),
        n_heads: heads,
        n_b: a.n_b,
        d_head: a.d_head,
        element_width: cfg.element_width,
    };
    let slow = PhysicalLayout {
        tier: Tier::Slow,
        n_num: if policy.offloads() { batch * block_count(a.n, a.n_b) } else { 0 },
        ..fast
    };
    let mut manager = KvBlockManager::new(fast, slow)?;
    let home = if policy.offloads() { Tier::Slow } else { Tier::Fast };

    let mut rng = stream_rng(cfg.seed, 0);
    let drift = cfg.query_drift;
    let innovation = (1.0 - drift * drift).sqrt();
    let prefill = a.n - cfg.steps - cfg.warmup;
    let prefill_blocks = block_count(prefill, a.n_b);
    let mut state: Vec<SeqHead> = Vec::with_capacity(batch * heads);
    for b in 0..batch {
        for h in 0..heads {
            let mut sh = SeqHead {
                keys: Vec::new(),
                s_e: Vec::new(),
                query: normal_vec(&mut rng, cfg.score_dim),
            };
            for j in 0..prefill_blocks {
                sh.keys.push(normal_vec(&mut rng, cfg.score_dim));
                sh.s_e.push(rng.sample(StandardNormal));
                manager.allocate(home, BlockKey::new(b, h, j))?;
            }
            state.push(sh);
        }
    }

    let bpb = manager.bytes_per_block() as f64 * cfg.n_layers as f64;
    let mut total_time = 0.0;
    let mut attn_time = 0.0;
    let mut max_topk_fetch = 0;
    for i in 0..cfg.warmup + cfg.steps {
        let t = prefill + i + 1;
        if i == cfg.warmup {
            manager.reset_stats();
            max_topk_fetch = 0;
        }
        let measured = i >= cfg.warmup;
        let mut selections: Vec<SelectionResult> = Vec::with_capacity(state.len());
        for (idx, sh) in state.iter_mut().enumerate() {
            let (b, h) = (idx / heads, idx % heads);
            if block_count(t, a.n_b) > sh.keys.len() {
                sh.keys.push(normal_vec(&mut rng, cfg.score_dim));
                sh.s_e.push(rng.sample(StandardNormal));
                manager.append(BlockKey::new(b, h, sh.keys.len() - 1), &mut NullMover)?;
            }
            for x in sh.query.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x = drift * *x + innovation * z;
            }
            let s_q: Vec<f64> = sh
                .keys
                .iter()
                .map(|k| k.iter().zip(&sh.query).map(|(x, y)| x * y).sum())
                .collect();
            selections.push(match policy {
                Policy::Nosa => nosa_select(&s_q, &sh.s_e, t, a)?,
                _ => infllmv2_select(&s_q, t, a)?,
            });
        }

        let mut attended = 0usize;
        let mut fetched = 0usize;
        for h in 0..heads {
            let required: BTreeSet<BlockKey> = (0..batch)
                .flat_map(|b| {
                    selections[b * heads + h]
                        .attended_blocks()
                        .into_iter()
                        .map(move |j| BlockKey::new(b, h, j))
                })
                .collect();
            attended += required.len();
            let plan = manager.plan_transfers(&required)?;
            fetched += plan.fetch.len();
            let mut per_seq = vec![0usize; batch];
            for key in &plan.fetch {
                let sel = &selections[key.batch * heads + h];
                if sel.blocks_q.contains(&key.block) || sel.blocks_e.contains(&key.block) {
                    per_seq[key.batch] += 1;
                }
            }
            max_topk_fetch = max_topk_fetch.max(per_seq.into_iter().max().unwrap_or(0));
            manager.apply_transfers(&plan, &mut NullMover)?;
        }

        if measured {
            let cost = step_cost(
                batch,
                attended as f64 * bpb / batch as f64,
                fetched as f64 * bpb / batch as f64,
                params,
            )?;
            total_time += cost.t_total;
            attn_time += cost.attn_ratio * cost.t_total;
        }
    }

    let stats = manager.residency_stats();
    Ok(SimReport {
        policy,
        batch,
        n: a.n,
        memory_bytes: cfg.memory_footprint(policy, batch),
        steps: cfg.steps,
        hit_rate: stats.hit_rate(),
        tokens_per_s: (batch * cfg.steps) as f64 / total_time,
        mean_step_s: total_time / cfg.steps as f64,
        attn_ratio: attn_time / total_time,
        bytes_up: stats.bytes_up * cfg.n_layers as u64,
        bytes_down: stats.bytes_down * cfg.n_layers as u64,
        max_topk_fetch,
    })
}

/// One cell of a throughput grid: a policy at a context length under a
/// KV memory budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub policy: Policy,
    pub n: usize,
    pub memory_budget: u64,
}

/// Simulates every grid point (in parallel), sizing each batch from the
/// budget. Reports come back in input order.
pub fn simulate_grid(
    base: &SimConfig,
    points: &[GridPoint],
    params: &CostModelParams,
) -> Result<Vec<SimReport>, SimError> {
    points
        .par_iter()
        .map(|p| {
            let mut cfg = base.clone();
            cfg.attention.n = p.n;
            let batch = cfg.batch_for_budget(p.policy, p.memory_budget);
            if batch == 0 {
                return Err(SimError::Setup(format!(
                    "budget {} bytes fits no {} sequence at n = {}",
                    p.memory_budget, p.policy, p.n
                )));
            }
            simulate_decode(&cfg, p.policy, batch, params)
        })
        .collect()
}

/// Top-k blocks fetched at one step of a single-sequence trace replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFetch {
    pub step: usize,
    pub kv_head: usize,
    pub topk_fetched: usize,
    pub topk_selected: usize,
}

/// Replays the attended sets of `trace` through a manager whose fast tier
/// holds `max_attended_blocks + 1` slots per head, creating blocks as the
/// context grows, and counts the top-k blocks each step had to fetch.
pub fn trace_fetch_counts(trace: &DecodeTrace) -> Result<Vec<TraceFetch>, SimError> {
    let cfg = &trace.config;
    let fast = PhysicalLayout {
        tier: Tier::Fast,
        n_num: cfg.max_attended_blocks() + 1,
        n_heads: cfg.n_kv_head,
        n_b: cfg.n_b,
        d_head: cfg.d_head,
        element_width: 2,
    };
    let slow = PhysicalLayout {
        tier: Tier::Slow,
        n_num: block_count(cfg.n, cfg.n_b),
        ..fast
    };
    let mut manager = KvBlockManager::new(fast, slow)?;
    let mut out = Vec::new();
    for ht in &trace.heads {
        let mut blocks = 0;
        for sel in &ht.steps {
            while blocks < block_count(sel.step, cfg.n_b) {
                manager.append(BlockKey::new(0, ht.kv_head, blocks), &mut NullMover)?;
                blocks += 1;
            }
            let required = sel
                .attended_blocks()
                .into_iter()
                .map(|j| BlockKey::new(0, ht.kv_head, j))
                .collect();
            let plan = manager.plan_transfers(&required)?;
            let topk = sel.topk_blocks();
            out.push(TraceFetch {
                step: sel.step,
                kv_head: ht.kv_head,
                topk_fetched: plan
                    .fetch
                    .iter()
                    .filter(|k| topk.binary_search(&k.block).is_ok())
                    .count(),
                topk_selected: topk.len(),
            });
            manager.apply_transfers(&plan, &mut NullMover)?;
        }
    }
    Ok(out)
}
