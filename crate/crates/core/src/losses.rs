//! Training objective: base cross-entropy, sampler cross-entropy and the
//! latent-consistency term that pulls mask-row hidden states toward the hidden
//! state the frozen model produces one real token later.

use serde::{Deserialize, Serialize};

use crate::batching::{MaskedBatch, IGNORE};
use crate::model::{ForwardVars, ModelError};
use crate::numerics::{Scalar, Tape, Var};
use crate::sampler::{sampler_logits_vars, BoundSampler};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub base: f64,
    pub sampler: f64,
    pub lcm: f64,
    /// Divide each squared distance by the hidden width.
    pub lcm_per_dim_mean: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            base: 1.0,
            sampler: 1.0,
            lcm: 1.0,
            lcm_per_dim_mean: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("base", self.base), ("sampler", self.sampler), ("lcm", self.lcm)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(format!("loss weight {name} must be finite and >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub base_ce: f64,
    pub sampler_ce: f64,
    pub lcm: f64,
    pub total: f64,
    /// Labelled real-token rows.
    pub ntp_rows: usize,
    /// Labelled mask rows.
    pub mtp_rows: usize,
    /// Anchors with at least one paired mask row.
    pub lcm_anchors: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub base_ce: Var,
    pub sampler_ce: Var,
    pub lcm: Var,
    pub total: Var,
}

/// Mean base and sampler cross-entropy over every labelled row.
///
/// Without a sampler the sampler term is a constant zero.
pub fn base_and_sampler_ce<F: Scalar>(
    tape: &mut Tape<F>,
    batch: &MaskedBatch,
    fwd: &ForwardVars,
    sampler: Option<BoundSampler<'_>>,
) -> Result<(Var, Var), ModelError> {
    let base = tape.cross_entropy(fwd.logits, &batch.base_labels, IGNORE)?;
    let Some(s) = sampler else {
        return Ok((base, zero(tape)));
    };
    let mut rows = Vec::new();
    let mut prev = Vec::new();
    let mut labels = Vec::new();
    for (r, &label) in batch.base_labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let p =
            batch.prev_token[r].ok_or_else(|| ModelError::Input(format!("labelled row {r} has no previous token")))?;
        rows.push(r);
        prev.push(p as usize);
        labels.push(label);
    }
    if rows.is_empty() {
        return Ok((base, zero(tape)));
    }
    let z = tape.gather_rows(fwd.hidden, &rows)?;
    let logits = sampler_logits_vars(tape, s, &prev, z)?;
    let ce = tape.cross_entropy(logits, &labels, IGNORE)?;
    Ok((base, ce))
}

/// Latent consistency over `(mask row, anchor row)` pairs; anchors are detached.
pub fn lcm_loss<F: Scalar>(
    tape: &mut Tape<F>,
    hidden: Var,
    pairs: &[(usize, usize)],
    per_dim_mean: bool,
) -> Result<Var, ModelError> {
    Ok(tape.paired_sq_dist(hidden, pairs, per_dim_mean)?)
}

pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    base_ce: Var,
    sampler_ce: Var,
    lcm: Var,
    weights: &LossWeights,
) -> Result<Var, ModelError> {
    let w = |x: f64| F::from_f64_lossy(x);
    Ok(tape.weighted_sum(&[
        (base_ce, w(weights.base)),
        (sampler_ce, w(weights.sampler)),
        (lcm, w(weights.lcm)),
    ])?)
}

/// Records every loss term for one batch and returns the handles plus a report.
pub fn compute_losses<F: Scalar>(
    tape: &mut Tape<F>,
    batch: &MaskedBatch,
    fwd: &ForwardVars,
    sampler: Option<BoundSampler<'_>>,
    weights: &LossWeights,
) -> Result<(LossVars, LossReport), ModelError> {
    let (base_ce, sampler_ce) = base_and_sampler_ce(tape, batch, fwd, sampler)?;
    let lcm = lcm_loss(tape, fwd.hidden, &batch.lcm_pairs, weights.lcm_per_dim_mean)?;
    let total = total_loss(tape, base_ce, sampler_ce, lcm, weights)?;
    let labelled = |mask: bool| {
        (0..batch.len())
            .filter(|&r| batch.base_labels[r] != IGNORE && batch.is_mask_row(r) == mask)
            .count()
    };
    let mut anchors: Vec<usize> = batch.lcm_pairs.iter().map(|p| p.1).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let item = |v: Var| tape.value(v).item().as_f64();
    let report = LossReport {
        base_ce: item(base_ce),
        sampler_ce: item(sampler_ce),
        lcm: item(lcm),
        total: item(total),
        ntp_rows: labelled(false),
        mtp_rows: labelled(true),
        lcm_anchors: anchors.len(),
    };
    Ok((
        LossVars {
            base_ce,
            sampler_ce,
            lcm,
            total,
        },
        report,
    ))
}

/// Mean cross-entropy over labelled real-token rows only.
pub fn ntp_only_ce<F: Scalar>(tape: &mut Tape<F>, batch: &MaskedBatch, logits: Var) -> Result<Var, ModelError> {
    Ok(tape.cross_entropy(logits, &batch.ntp_labels(), IGNORE)?)
}

fn zero<F: Scalar>(tape: &mut Tape<F>) -> Var {
    tape.constant(crate::numerics::Tensor::scalar(F::zero()))
}
