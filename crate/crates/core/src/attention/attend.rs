//! Single-query masked attention with an eviction-head bias.

use super::{AttentionError, VariantKind};
use crate::numerics::{dot, softmax_stable, Matrix, NumericsError, ScoreVector};

fn check_shapes(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    mask: &[f64],
    bias: &[f64],
) -> Result<(), AttentionError> {
    let t = k.rows();
    if q.len() != k.cols() || v.rows() != t || mask.len() != t || bias.len() != t {
        return Err(NumericsError::Shape {
            op: "attend",
            lhs: (t, k.cols()),
            rhs: (v.rows(), q.len()),
        }
        .into());
    }
    if mask.iter().all(|m| *m == f64::NEG_INFINITY) {
        return Err(AttentionError::AllMasked);
    }
    Ok(())
}

/// `sum_j w_j v_j` with `w = softmax(q·k_j + offset(b_j) + m_j)`.
///
/// Masked positions (`m_j = -inf`) get exactly zero weight. The offset is
/// `b_j` for the retaining and ED-DMA heads, `ln b_j` for DMA (whose bias
/// is already exponentiated) and `0` for S-DMA.
pub fn attend_biased(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    mask: &[f64],
    bias: &[f64],
    variant: VariantKind,
) -> Result<ScoreVector, AttentionError> {
    check_shapes(q, k, v, mask, bias)?;
    let mut logits = Vec::with_capacity(k.rows());
    for j in 0..k.rows() {
        if mask[j] == f64::NEG_INFINITY {
            logits.push(f64::NEG_INFINITY);
        } else {
            logits.push(dot(q, k.row(j)) + variant.logit_offset(bias[j])? + mask[j]);
        }
    }
    let weights = softmax_stable(&ScoreVector(logits))?;
    let mut out = vec![0.0; v.cols()];
    for (j, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.row(j)) {
            *o += w * x;
        }
    }
    Ok(ScoreVector(out))
}

/// Reference implementation written as a literal ratio of sums, using the
/// multiplicative form of each variant's bias. Used only to cross-check
/// [`attend_biased`].
pub fn dense_oracle(
    q: &[f64],
    k: &Matrix,
    v: &Matrix,
    mask: &[f64],
    bias: &[f64],
    variant: VariantKind,
) -> Result<ScoreVector, AttentionError> {
    check_shapes(q, k, v, mask, bias)?;
    let t = k.rows();
    let d = v.cols();

    let mut raw = vec![0.0; t];
    let mut shift = f64::NEG_INFINITY;
    for j in 0..t {
        if mask[j] != f64::NEG_INFINITY {
            let mut s = 0.0;
            for c in 0..q.len() {
                s += q[c] * k.get(j, c);
            }
            raw[j] = s;
            if s > shift {
                shift = s;
            }
        }
    }

    let mut numer = vec![0.0; d];
    let mut denom = 0.0;
    for j in 0..t {
        if mask[j] == f64::NEG_INFINITY {
            continue;
        }
        let multiplier = match variant {
            VariantKind::Retaining | VariantKind::EdDma => bias[j].exp(),
            VariantKind::Dma => bias[j],
            VariantKind::SDma => (bias[j] - bias[j]).exp(),
        };
        let w = multiplier * (raw[j] - shift).exp();
        denom += w;
        for c in 0..d {
            numer[c] += w * v.get(j, c);
        }
    }
    if denom <= 0.0 {
        return Err(AttentionError::AllMasked);
    }
    for x in &mut numer {
        *x /= denom;
    }
    Ok(ScoreVector(numer))
}
