//! Eviction heads: per-token importance scores and the matching attention
//! bias treatment for each head variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AttentionError;
use crate::numerics::{vecmat, Matrix, NumericsError, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    /// MLP over the hidden state; additive bias.
    #[serde(rename = "retaining")]
    Retaining,
    /// Gated projection of the value vector, exponentiated before selection.
    #[serde(rename = "dma")]
    Dma,
    /// Same projection, exponent deferred to the attention computation.
    #[serde(rename = "ed-dma")]
    EdDma,
    /// Same projection; the forward pass carries no bias at all.
    #[serde(rename = "s-dma")]
    SDma,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Retaining,
        VariantKind::Dma,
        VariantKind::EdDma,
        VariantKind::SDma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Retaining => "retaining",
            VariantKind::Dma => "dma",
            VariantKind::EdDma => "ed-dma",
            VariantKind::SDma => "s-dma",
        }
    }

    /// Whether the head reads hidden states (`true`) or value vectors.
    pub fn reads_hidden(self) -> bool {
        self == VariantKind::Retaining
    }

    pub fn default_nonlinearity(self) -> Nonlinearity {
        match self {
            VariantKind::Retaining => Nonlinearity::Sigmoid,
            _ => Nonlinearity::Silu,
        }
    }

    /// Additive logit offset for a bias value `b`: the weight of position
    /// `j` is proportional to `exp(q·k_j + offset(b_j))`.
    pub fn logit_offset(self, b: f64) -> Result<f64, AttentionError> {
        match self {
            VariantKind::Retaining | VariantKind::EdDma => Ok(b),
            VariantKind::Dma => {
                if b < 0.0 || b.is_nan() {
                    Err(AttentionError::NegativeMultiplicativeBias(b))
                } else {
                    Ok(b.ln())
                }
            }
            // exp(b - stop_grad(b)) == 1 in the forward pass.
            VariantKind::SDma => Ok(0.0),
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = AttentionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "retaining" => Ok(VariantKind::Retaining),
            "dma" => Ok(VariantKind::Dma),
            "ed-dma" | "eddma" | "ed_dma" => Ok(VariantKind::EdDma),
            "s-dma" | "sdma" | "s_dma" => Ok(VariantKind::SDma),
            _ => Err(AttentionError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Sigmoid,
    Silu,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Nonlinearity::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

/// One eviction head: `score(x) = tau(x · w1) · w2`, with `x` the value
/// vector (DMA family) or the hidden state (retaining head). DMA
/// additionally exponentiates the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionHead {
    pub kind: VariantKind,
    pub tau: Nonlinearity,
    /// `input_width x hidden`
    pub w1: Matrix,
    /// `hidden x 1`
    pub w2: Matrix,
}

impl EvictionHead {
    pub fn new(kind: VariantKind, w1: Matrix, w2: Matrix) -> Result<Self, AttentionError> {
        if w2.cols() != 1 || w2.rows() != w1.cols() {
            return Err(NumericsError::Shape {
                op: "eviction head w1/w2",
                lhs: w1.shape(),
                rhs: w2.shape(),
            }
            .into());
        }
        Ok(Self {
            kind,
            tau: kind.default_nonlinearity(),
            w1,
            w2,
        })
    }

    pub fn with_tau(mut self, tau: Nonlinearity) -> Self {
        self.tau = tau;
        self
    }

    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    /// Score for one token given its value vector and hidden state.
    pub fn score_token(&self, value: &[f64], hidden: &[f64]) -> Result<f64, AttentionError> {
        let x = if self.kind.reads_hidden() { hidden } else { value };
        let pre = vecmat(x, &self.w1)?;
        let s: f64 = pre
            .iter()
            .zip(self.w2.data())
            .map(|(p, w)| self.tau.apply(*p) * w)
            .sum();
        Ok(match self.kind {
            VariantKind::Dma => s.exp(),
            _ => s,
        })
    }

    /// Per-token importance scores for a whole cache. `values` is
    /// `t x d_head`; `hidden` is `t x d` and only read by the retaining head.
    pub fn importance_scores(
        &self,
        values: &Matrix,
        hidden: &Matrix,
    ) -> Result<ScoreVector, AttentionError> {
        let input = if self.kind.reads_hidden() {
            hidden
        } else {
            values
        };
        if input.cols() != self.input_width() {
            return Err(NumericsError::Shape {
                op: "importance_scores",
                lhs: input.shape(),
                rhs: self.w1.shape(),
            }
            .into());
        }
        input
            .iter_rows()
            .map(|row| self.score_token(row, row))
            .collect::<Result<Vec<_>, _>>()
            .map(ScoreVector)
    }
}
