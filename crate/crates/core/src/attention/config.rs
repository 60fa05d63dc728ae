use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How the always-attended sink and window are charged against `k`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetAccounting {
    /// Sink and window tokens count toward `k`, taken from the query-agnostic
    /// side: the free query-agnostic budget is `k - n_s - n_w - k_q`.
    #[default]
    FixedInsideBudget,
    /// Sink and window are attended on top of `k`; the free budgets are
    /// exactly `k_q` and `k_e`.
    FixedOutsideBudget,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid attention config: field `{field}`: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn err(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        message: message.into(),
    }
}

/// Dimensions and token budgets of one attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Maximum sequence length.
    pub n: usize,
    /// Model width.
    pub d: usize,
    pub n_head: usize,
    pub n_kv_head: usize,
    pub d_head: usize,
    /// Block size in tokens.
    pub n_b: usize,
    /// Attention-sink length in tokens.
    pub n_s: usize,
    /// Sliding-window length in tokens.
    pub n_w: usize,
    /// Total selection budget in tokens (`k_q + k_e`).
    pub k: usize,
    pub k_q: usize,
    pub k_e: usize,
    #[serde(default)]
    pub accounting: BudgetAccounting,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_b == 0 {
            return Err(err("n_b", "block size must be positive"));
        }
        if self.d_head == 0 || self.d == 0 {
            return Err(err("d_head", "widths must be positive"));
        }
        if self.n_head == 0 || self.n_kv_head == 0 {
            return Err(err("n_kv_head", "head counts must be positive"));
        }
        if self.n_head % self.n_kv_head != 0 {
            return Err(err(
                "n_head",
                format!(
                    "n_head ({}) must be divisible by n_kv_head ({})",
                    self.n_head, self.n_kv_head
                ),
            ));
        }
        if self.k != self.k_q + self.k_e {
            return Err(err(
                "k",
                format!(
                    "k ({}) must equal k_q + k_e ({} + {})",
                    self.k, self.k_q, self.k_e
                ),
            ));
        }
        for (field, value) in [
            ("n_s", self.n_s),
            ("n_w", self.n_w),
            ("k", self.k),
            ("k_q", self.k_q),
            ("k_e", self.k_e),
        ] {
            if value % self.n_b != 0 {
                return Err(err(
                    field,
                    format!("{field} ({value}) must be divisible by n_b ({})", self.n_b),
                ));
            }
        }
        if self.n_s + self.n_w > self.k {
            return Err(err(
                "k",
                format!(
                    "n_s + n_w ({} + {}) must not exceed k ({})",
                    self.n_s, self.n_w, self.k
                ),
            ));
        }
        if self.k > self.n {
            return Err(err(
                "k",
                format!("k ({}) must not exceed n ({})", self.k, self.n),
            ));
        }
        if self.accounting == BudgetAccounting::FixedInsideBudget
            && self.k_q + self.n_s + self.n_w > self.k
        {
            return Err(err(
                "k_q",
                format!(
                    "with sink/window inside the budget, k_q + n_s + n_w ({}) must not exceed k ({})",
                    self.k_q + self.n_s + self.n_w,
                    self.k
                ),
            ));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_head / self.n_kv_head
    }

    /// Free query-agnostic token budget after the accounting rule.
    pub fn k_e_topk(&self) -> usize {
        match self.accounting {
            BudgetAccounting::FixedInsideBudget => self.k - self.n_s - self.n_w - self.k_q,
            BudgetAccounting::FixedOutsideBudget => self.k_e,
        }
    }

    pub fn query_blocks(&self) -> usize {
        self.k_q / self.n_b
    }

    pub fn agnostic_blocks(&self) -> usize {
        self.k_e_topk() / self.n_b
    }

    /// Number of blocks chosen by top-k at each step (both sides together).
    pub fn topk_blocks(&self) -> usize {
        self.query_blocks() + self.agnostic_blocks()
    }

    pub fn sink_blocks(&self) -> usize {
        self.n_s / self.n_b
    }

    /// Upper bound on blocks attended at any step: sink, window (which can
    /// straddle one extra block), the block of the current token and top-k.
    pub fn max_attended_blocks(&self) -> usize {
        self.sink_blocks() + self.n_w / self.n_b + 1 + self.topk_blocks()
    }

    /// Locality floor as an exact ratio `(agnostic, total)` in blocks.
    pub fn locality_bound_ratio(&self) -> (usize, usize) {
        (self.agnostic_blocks(), self.topk_blocks())
    }

    /// Locality floor `k_e_topk / (k_q + k_e_topk)`; 1 when nothing is
    /// chosen by top-k.
    pub fn locality_bound(&self) -> f64 {
        let (num, den) = self.locality_bound_ratio();
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }
}
