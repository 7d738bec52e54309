//! Token-level losses: one-hot NLL, top-K distillation cross-entropy and their
//! interpolation. Each returns the summed loss and the sparse target weights
//! that [`crate::model::backward`] turns into gradients.

use ndarray::{ArrayView2, ArrayView3};
use thiserror::Error;

use crate::model::TargetWeights;
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("target id {id} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { id: u32, vocab: usize },
    #[error("duplicate token id {0} in a top-k record")]
    DuplicateToken(u32),
    #[error("missing teacher record for row {row}, position {pos}")]
    MissingRecord { row: usize, pos: usize },
    #[error("interpolation weight {0} outside [0, 1]")]
    Lambda(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Borrowed top-K distribution for one target position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKRecord<'a> {
    pub token_ids: &'a [u32],
    pub probs: &'a [f32],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Sum over non-pad target positions.
    pub total: f64,
    pub per_token_count: usize,
}

impl LossValue {
    pub fn mean(&self) -> f64 {
        if self.per_token_count == 0 {
            0.0
        } else {
            self.total / self.per_token_count as f64
        }
    }
}

pub type LossOutput<F> = (LossValue, TargetWeights<F>);

fn check_shapes<F>(
    logprobs: &ArrayView3<F>,
    mask: &ArrayView2<bool>,
) -> Result<(usize, usize, usize), LossError> {
    let (b, t, v) = logprobs.dim();
    if mask.dim() != (b, t) {
        return Err(LossError::Shape(format!(
            "mask is {:?}, logprobs are [{b}, {t}, {v}]",
            mask.dim()
        )));
    }
    Ok((b, t, v))
}

/// `-Σ logprobs[b, t, tgt_out[b, t]]` over unmasked positions.
pub fn nll_loss<F: Real>(
    logprobs: ArrayView3<F>,
    tgt_out: ArrayView2<u32>,
    mask: ArrayView2<bool>,
) -> Result<LossOutput<F>, LossError> {
    let (bsz, tlen, vocab) = check_shapes(&logprobs, &mask)?;
    if tgt_out.dim() != (bsz, tlen) {
        return Err(LossError::Shape("targets do not match logprobs".into()));
    }
    let mut weights = TargetWeights::empty(bsz, tlen);
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..bsz {
        for t in 0..tlen {
            if !mask[[b, t]] {
                continue;
            }
            let id = tgt_out[[b, t]];
            if id as usize >= vocab {
                return Err(LossError::TargetOutOfRange { id, vocab });
            }
            total -= logprobs[[b, t, id as usize]].as_f64();
            count += 1;
            weights.at_mut(b, t).push((id, F::one()));
        }
    }
    Ok((
        LossValue {
            total,
            per_token_count: count,
        },
        weights,
    ))
}

/// `-Σ Σ_j probs_j · logprobs[b, t, ids_j]` over unmasked positions.
/// `records[b][t]` holds the teacher record for position `t` of row `b`.
pub fn kd_loss<F: Real>(
    logprobs: ArrayView3<F>,
    records: &[Vec<TopKRecord<'_>>],
    mask: ArrayView2<bool>,
) -> Result<LossOutput<F>, LossError> {
    let (bsz, tlen, vocab) = check_shapes(&logprobs, &mask)?;
    if records.len() != bsz {
        return Err(LossError::Shape(format!(
            "{} record rows for a batch of {bsz}",
            records.len()
        )));
    }
    let mut weights = TargetWeights::empty(bsz, tlen);
    let mut total = 0.0;
    let mut count = 0;
    for b in 0..bsz {
        for t in 0..tlen {
            if !mask[[b, t]] {
                continue;
            }
            let rec = records[b]
                .get(t)
                .ok_or(LossError::MissingRecord { row: b, pos: t })?;
            let slot = weights.at_mut(b, t);
            for (j, (&id, &p)) in rec.token_ids.iter().zip(rec.probs).enumerate() {
                if id as usize >= vocab {
                    return Err(LossError::TargetOutOfRange { id, vocab });
                }
                if rec.token_ids[..j].contains(&id) {
                    return Err(LossError::DuplicateToken(id));
                }
                total -= p as f64 * logprobs[[b, t, id as usize]].as_f64();
                slot.push((id, F::of(p as f64)));
            }
            count += 1;
        }
    }
    Ok((
        LossValue {
            total,
            per_token_count: count,
        },
        weights,
    ))
}

/// `(1 - λ) · nll + λ · kd` for both the value and the target weights.
pub fn combined_loss<F: Real>(
    nll: &LossOutput<F>,
    kd: &LossOutput<F>,
    lambda: f64,
) -> Result<LossOutput<F>, LossError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(LossError::Lambda(lambda));
    }
    let (nv, nw) = nll;
    let (kv, kw) = kd;
    if nw.batch != kw.batch || nw.time != kw.time {
        return Err(LossError::Shape("losses come from different batches".into()));
    }
    // The endpoints reuse one side untouched so the resulting gradients are
    // bit-identical to the single-loss path.
    if lambda == 0.0 {
        return Ok(nll.clone());
    }
    if lambda == 1.0 {
        return Ok(kd.clone());
    }
    let value = LossValue {
        total: (1.0 - lambda) * nv.total + lambda * kv.total,
        per_token_count: nv.per_token_count,
    };
    Ok((value, nw.combine(F::of(1.0 - lambda), kw, F::of(lambda))))
}
