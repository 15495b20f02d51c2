//! Masked input layouts.
//!
//! A training batch interleaves `k` mask tokens after every trained position so
//! one forward pass answers `n` "prefix + masks" queries at once. Inference
//! layouts append masks after the speculated chain (linear) or after every chain
//! token (quadratic). Attention sets keep real-token rows blind to every mask row
//! and keep mask blocks blind to each other.

use std::sync::Arc;

use thiserror::Error;

use crate::model::ForwardInput;
use crate::numerics::AllowedSet;

/// Label sentinel for rows that carry no loss. Never a valid vocabulary id.
pub const IGNORE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("sequence must have at least 2 tokens, got {0}")]
    TooShort(usize),
    #[error("loss_flags length {flags} does not match sequence length {seq}")]
    FlagsLength { flags: usize, seq: usize },
    #[error("at least one mask id is required")]
    NoMasks,
    #[error("verified prefix must be nonempty")]
    EmptyVerified,
    #[error("speculated length {got} invalid for k = {k}")]
    SpeculatedLength { got: usize, k: usize },
}

/// Tokens, positions, labels, attention sets and gates for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub tokens: Vec<u32>,
    pub position_ids: Vec<usize>,
    /// `true` on mask rows (the adapter path is active there).
    pub gate: Vec<bool>,
    /// Target id per row, or [`IGNORE`].
    pub base_labels: Vec<u32>,
    pub attention: Arc<AllowedSet>,
    /// For mask rows, the row of the real token the block extends.
    pub block_anchor: Vec<Option<usize>>,
    /// `(mask row, next-token row)` pairs whose hidden states should agree.
    pub lcm_pairs: Vec<(usize, usize)>,
    /// Token conditioning the sampler at each row (the token just before the label).
    pub prev_token: Vec<Option<u32>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn forward_input(&self) -> ForwardInput<'_> {
        ForwardInput {
            tokens: &self.tokens,
            positions: &self.position_ids,
            allowed: self.attention.clone(),
            gate: &self.gate,
        }
    }

    /// Mask rows anchored at `anchor_row`, in `m_1..m_k` order.
    pub fn block_rows(&self, anchor_row: usize) -> Vec<usize> {
        self.block_anchor
            .iter()
            .enumerate()
            .filter_map(|(r, a)| (*a == Some(anchor_row)).then_some(r))
            .collect()
    }

    pub fn is_mask_row(&self, row: usize) -> bool {
        self.block_anchor[row].is_some()
    }

    pub fn ntp_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| !self.is_mask_row(r)).collect()
    }

    pub fn mtp_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.is_mask_row(r)).collect()
    }

    /// Labels restricted to non-mask rows; mask rows become [`IGNORE`].
    pub fn ntp_labels(&self) -> Vec<u32> {
        self.base_labels
            .iter()
            .zip(&self.block_anchor)
            .map(|(&l, a)| if a.is_some() { IGNORE } else { l })
            .collect()
    }
}

/// An inference layout together with the rows holding the verification chain.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceLayout {
    pub batch: MaskedBatch,
    /// Row of the last verified token followed by the rows of `s_1..s_s`.
    pub chain_rows: Vec<usize>,
}

struct Builder {
    tokens: Vec<u32>,
    position_ids: Vec<usize>,
    gate: Vec<bool>,
    base_labels: Vec<u32>,
    allowed: Vec<Vec<usize>>,
    block_anchor: Vec<Option<usize>>,
    prev_token: Vec<Option<u32>>,
}

impl Builder {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            position_ids: Vec::new(),
            gate: Vec::new(),
            base_labels: Vec::new(),
            allowed: Vec::new(),
            block_anchor: Vec::new(),
            prev_token: Vec::new(),
        }
    }

    /// Appends a row; `attend` lists earlier rows, the row itself is added.
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        token: u32,
        position: usize,
        is_mask: bool,
        label: u32,
        mut attend: Vec<usize>,
        anchor: Option<usize>,
        prev: Option<u32>,
    ) -> usize {
        let row = self.tokens.len();
        attend.push(row);
        self.tokens.push(token);
        self.position_ids.push(position);
        self.gate.push(is_mask);
        self.base_labels.push(label);
        self.allowed.push(attend);
        self.block_anchor.push(anchor);
        self.prev_token.push(prev);
        row
    }

    /// Appends a block of masks anchored at `anchor_row` (position `anchor_pos`),
    /// each seeing `context` plus the earlier masks of the block.
    fn push_block(
        &mut self,
        masks: &[u32],
        anchor_row: usize,
        anchor_pos: usize,
        context: &[usize],
        mut label_of: impl FnMut(usize) -> (u32, Option<u32>),
    ) -> Vec<usize> {
        let mut rows = Vec::with_capacity(masks.len());
        for (j, &m) in masks.iter().enumerate() {
            let mut attend = context.to_vec();
            attend.extend_from_slice(&rows);
            let (label, prev) = label_of(j + 1);
            let r = self.push(m, anchor_pos + j + 1, true, label, attend, Some(anchor_row), prev);
            rows.push(r);
        }
        rows
    }

    fn finish(self, lcm_pairs: Vec<(usize, usize)>) -> MaskedBatch {
        MaskedBatch {
            tokens: self.tokens,
            position_ids: self.position_ids,
            gate: self.gate,
            base_labels: self.base_labels,
            attention: Arc::new(AllowedSet::from_rows(self.allowed).expect("builder only attends backwards")),
            block_anchor: self.block_anchor,
            lcm_pairs,
            prev_token: self.prev_token,
        }
    }
}

/// Training layout for `seq` with `masks = [m_1..m_k]` after every flagged position.
///
/// Row order is `x_1, [m_1..m_k], x_2, [m_1..m_k], ...`; no block follows the final
/// token or any position whose flag is off.
pub fn build_training_batch(seq: &[u32], loss_flags: &[bool], masks: &[u32]) -> Result<MaskedBatch, BatchError> {
    let n = seq.len();
    if n < 2 {
        return Err(BatchError::TooShort(n));
    }
    if loss_flags.len() != n {
        return Err(BatchError::FlagsLength {
            flags: loss_flags.len(),
            seq: n,
        });
    }
    if masks.is_empty() {
        return Err(BatchError::NoMasks);
    }
    let ntp_label = |i: usize| {
        if loss_flags[i] && i + 1 < n {
            seq[i + 1]
        } else {
            IGNORE
        }
    };
    let mut b = Builder::new();
    let mut ntp_rows: Vec<usize> = Vec::with_capacity(n);
    // (block origin i, j, row)
    let mut mask_rows: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..n {
        let row = b.push(seq[i], i, false, ntp_label(i), ntp_rows.clone(), None, Some(seq[i]));
        ntp_rows.push(row);
        if loss_flags[i] && i + 1 < n {
            let rows = b.push_block(masks, row, i, &ntp_rows, |j| {
                let target = i + 1 + j;
                let label = if target < n { seq[target] } else { IGNORE };
                (label, seq.get(i + j).copied())
            });
            for (j0, r) in rows.into_iter().enumerate() {
                mask_rows.push((i, j0 + 1, r));
            }
        }
    }
    let mut lcm_pairs = Vec::new();
    for (i, j, r) in mask_rows {
        let partner = i + j;
        if partner < n {
            let pr = ntp_rows[partner];
            if b.base_labels[r] != IGNORE && b.base_labels[pr] != IGNORE {
                lcm_pairs.push((r, pr));
            }
        }
    }
    Ok(b.finish(lcm_pairs))
}

/// Causal layout `verified + speculated + [m_1..m_k]` with masks anchored at the last real token.
pub fn build_linear_inference_input(
    verified: &[u32],
    speculated: &[u32],
    masks: &[u32],
) -> Result<InferenceLayout, BatchError> {
    if verified.is_empty() {
        return Err(BatchError::EmptyVerified);
    }
    if masks.is_empty() {
        return Err(BatchError::NoMasks);
    }
    if speculated.len() > masks.len() {
        return Err(BatchError::SpeculatedLength {
            got: speculated.len(),
            k: masks.len(),
        });
    }
    let mut b = Builder::new();
    let mut real = Vec::new();
    for (i, &tok) in verified.iter().chain(speculated).enumerate() {
        let r = b.push(tok, i, false, IGNORE, real.clone(), None, None);
        real.push(r);
    }
    let anchor = *real.last().expect("nonempty");
    b.push_block(masks, anchor, anchor, &real, |_| (IGNORE, None));
    let n = verified.len();
    let chain_rows = (n - 1..n + speculated.len()).collect();
    Ok(InferenceLayout {
        batch: b.finish(Vec::new()),
        chain_rows,
    })
}

/// Tree layout `verified + [m..]? + [s_1, m_1..m_k] + ... + [s_k, m_1..m_k]`.
///
/// With `cover_reject_first` a block anchored at the last verified token is placed
/// first, so a rejection of `s_1` still leaves fresh speculation.
pub fn build_quadratic_inference_input(
    verified: &[u32],
    speculated: &[u32],
    masks: &[u32],
    cover_reject_first: bool,
) -> Result<InferenceLayout, BatchError> {
    if verified.is_empty() {
        return Err(BatchError::EmptyVerified);
    }
    if masks.is_empty() {
        return Err(BatchError::NoMasks);
    }
    if speculated.len() != masks.len() {
        return Err(BatchError::SpeculatedLength {
            got: speculated.len(),
            k: masks.len(),
        });
    }
    let mut b = Builder::new();
    let mut context = Vec::new();
    for (i, &tok) in verified.iter().enumerate() {
        let r = b.push(tok, i, false, IGNORE, context.clone(), None, None);
        context.push(r);
    }
    let last = verified.len() - 1;
    if cover_reject_first {
        b.push_block(masks, last, last, &context, |_| (IGNORE, None));
    }
    let mut chain_rows = vec![last];
    for (j, &tok) in speculated.iter().enumerate() {
        let pos = last + j + 1;
        let r = b.push(tok, pos, false, IGNORE, context.clone(), None, None);
        context.push(r);
        chain_rows.push(r);
        b.push_block(masks, r, pos, &context, |_| (IGNORE, None));
    }
    Ok(InferenceLayout {
        batch: b.finish(Vec::new()),
        chain_rows,
    })
}
