//! Greedy generation, speculative decoding and acceptance accounting.
//!
//! Every speculative step runs one forward pass over the verified prefix, the
//! speculated chain and the mask blocks, then keeps the longest speculated prefix
//! that matches the base model's own argmax choices plus one corrected token.
//! Speculated and verified rows run with the adapter gate off, so the kept
//! tokens are exactly what plain greedy decoding would produce.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batching::{build_linear_inference_input, build_quadratic_inference_input, BatchError, InferenceLayout};
use crate::model::{ForwardInput, Inference, ModelBundle, ModelError};
use crate::numerics::{argmax, AllowedSet, Scalar};
use crate::sampler::{sampler_chain, SamplerHead};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("{0}")]
    Invalid(String),
    #[error("acceptance rate needs at least one step")]
    NoSteps,
}

pub type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Linear,
    Quadratic,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Linear => "linear",
            Strategy::Quadratic => "quadratic",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Strategy::Linear),
            "quadratic" => Ok(Strategy::Quadratic),
            other => Err(format!("unknown strategy '{other}' (expected linear or quadratic)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub k_eval: usize,
    pub strategy: Strategy,
    pub max_steps: usize,
    /// Output is truncated to this many new tokens.
    pub max_new_tokens: usize,
    pub eos: Option<u32>,
    /// Quadratic only: also place a mask block right after the last verified token.
    pub cover_reject_first: bool,
}

impl DecodeOptions {
    pub fn new(k_eval: usize, strategy: Strategy, max_new_tokens: usize) -> Self {
        Self {
            k_eval,
            strategy,
            max_steps: max_new_tokens,
            max_new_tokens,
            eos: None,
            cover_reject_first: true,
        }
    }
}

/// Where the next step's speculation came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecSource {
    /// No mask block survived verification, or decoding ended.
    None,
    Sampler,
    BaseArgmax,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub speculated: usize,
    pub accepted: usize,
    pub emitted: usize,
    pub next: SpecSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub verified: Vec<u32>,
    pub speculated: Vec<u32>,
    pub steps: usize,
    pub generated: usize,
    pub trace: Vec<StepTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub generated: usize,
    pub steps: usize,
    pub k_eval: usize,
    /// `histogram[a]` counts steps that accepted `a` speculated tokens.
    pub histogram: Vec<usize>,
}

impl AcceptanceStats {
    pub fn new(k_eval: usize) -> Self {
        Self {
            generated: 0,
            steps: 0,
            k_eval,
            histogram: vec![0; k_eval + 1],
        }
    }

    pub fn rate(&self) -> Result<f64> {
        acceptance_rate(self)
    }
}

/// Tokens generated per forward pass.
pub fn acceptance_rate(stats: &AcceptanceStats) -> Result<f64> {
    if stats.steps == 0 {
        return Err(DecodeError::NoSteps);
    }
    Ok(stats.generated as f64 / stats.steps as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Prompt followed by the continuation.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub stats: AcceptanceStats,
    pub trace: Vec<StepTrace>,
}

impl DecodeOutput {
    pub fn continuation(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// What a drafter sees when asked for the next speculation.
pub struct DraftRequest<'a, F> {
    pub verified: &'a [u32],
    pub inference: &'a Inference<F>,
    /// Mask rows `m_1..m_k` anchored at the last accepted chain token.
    pub block_rows: &'a [usize],
    /// Base argmax at that anchor, i.e. the token the speculation continues from.
    pub seed_token: u32,
}

/// Produces speculated tokens from a mask block.
pub trait Drafter<F> {
    fn draft(&mut self, req: &DraftRequest<'_, F>) -> Result<(Vec<u32>, SpecSource)>;
}

/// Sampler chain over mask hidden states, or per-row base argmax without a sampler.
pub struct ModelDrafter<'m, F> {
    pub model: &'m ModelBundle<F>,
    pub sampler: Option<&'m SamplerHead<F>>,
}

impl<F: Scalar> Drafter<F> for ModelDrafter<'_, F> {
    fn draft(&mut self, req: &DraftRequest<'_, F>) -> Result<(Vec<u32>, SpecSource)> {
        match self.sampler {
            Some(head) => {
                let zs: Vec<&[F]> = req.block_rows.iter().map(|&r| req.inference.hidden.row(r)).collect();
                let toks = sampler_chain(head, self.model, req.seed_token, &zs)?;
                Ok((toks, SpecSource::Sampler))
            }
            None => {
                let toks = req
                    .block_rows
                    .iter()
                    .map(|&r| argmax(req.inference.logits.row(r)) as u32)
                    .collect();
                Ok((toks, SpecSource::BaseArgmax))
            }
        }
    }
}

fn plain_input<'a>(tokens: &'a [u32], positions: &'a [usize], gate: &'a [bool]) -> ForwardInput<'a> {
    ForwardInput {
        tokens,
        positions,
        allowed: Arc::new(AllowedSet::causal(tokens.len())),
        gate,
    }
}

/// Base logits of the last row of a plain causal pass over `tokens`.
fn next_token<F: Scalar>(model: &ModelBundle<F>, tokens: &[u32]) -> Result<u32> {
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let gate = vec![false; tokens.len()];
    let out = model.infer(&plain_input(tokens, &positions, &gate))?;
    Ok(argmax(out.logits.row(tokens.len() - 1)) as u32)
}

/// Repeated single-token argmax with a full-prefix recompute. Returns the continuation.
pub fn greedy_autoregressive<F: Scalar>(
    model: &ModelBundle<F>,
    prompt: &[u32],
    max_new: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(DecodeError::Invalid("prompt must be nonempty".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    while out.len() < max_new {
        let t = next_token(model, &tokens)?;
        tokens.push(t);
        out.push(t);
        if Some(t) == eos {
            break;
        }
    }
    Ok(out)
}

/// Accepts the longest prefix with `s_j == c_{j-1}` and appends the base choice after it.
pub fn verify_speculated(chain_preds: &[u32], speculated: &[u32]) -> Result<(usize, Vec<u32>)> {
    if chain_preds.len() != speculated.len() + 1 {
        return Err(DecodeError::Invalid(format!(
            "chain predictions {} must be speculated {} + 1",
            chain_preds.len(),
            speculated.len()
        )));
    }
    let a = speculated.iter().zip(chain_preds).take_while(|(s, c)| s == c).count();
    let mut emitted = speculated[..a].to_vec();
    emitted.push(chain_preds[a]);
    Ok((a, emitted))
}

fn mask_ids<F>(model: &ModelBundle<F>, k_eval: usize) -> Result<Vec<u32>> {
    let k_train = model.config.k_masks;
    if k_eval == 0 || k_eval > k_train {
        return Err(DecodeError::Invalid(format!(
            "k_eval must be in 1..={k_train}, got {k_eval}"
        )));
    }
    Ok((0..k_eval).map(|j| model.config.mask_id(j)).collect())
}

/// Speculative decoding with drafts from the mask blocks (sampler or base argmax).
pub fn speculative_decode<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    prompt: &[u32],
    opts: &DecodeOptions,
) -> Result<DecodeOutput> {
    let mut drafter = ModelDrafter { model, sampler };
    speculative_decode_with(model, prompt, opts, &mut drafter)
}

/// Speculative decoding with an arbitrary drafter. Output never depends on the drafter.
pub fn speculative_decode_with<F: Scalar, D: Drafter<F>>(
    model: &ModelBundle<F>,
    prompt: &[u32],
    opts: &DecodeOptions,
    drafter: &mut D,
) -> Result<DecodeOutput> {
    if prompt.is_empty() {
        return Err(DecodeError::Invalid("prompt must be nonempty".into()));
    }
    let masks = mask_ids(model, opts.k_eval)?;
    let k = opts.k_eval;
    let mut state = DecodeState {
        verified: prompt.to_vec(),
        speculated: Vec::new(),
        steps: 0,
        generated: 0,
        trace: Vec::new(),
    };
    let mut stats = AcceptanceStats::new(k);
    while state.generated < opts.max_new_tokens && state.steps < opts.max_steps {
        let spec = std::mem::take(&mut state.speculated);
        let layout = build_layout(&state.verified, &spec, &masks, opts)?;
        let inference = model.infer(&layout.batch.forward_input())?;
        let chain_preds: Vec<u32> = layout
            .chain_rows
            .iter()
            .map(|&r| argmax(inference.logits.row(r)) as u32)
            .collect();
        let (a, mut emitted) = verify_speculated(&chain_preds, &spec)?;
        let mut done = false;
        if let Some(pos) = opts.eos.and_then(|e| emitted.iter().position(|&t| t == e)) {
            emitted.truncate(pos + 1);
            done = true;
        }
        let room = opts.max_new_tokens - state.generated;
        if emitted.len() >= room {
            emitted.truncate(room);
            done = true;
        }
        state.verified.extend_from_slice(&emitted);
        state.generated += emitted.len();
        state.steps += 1;
        stats.histogram[a] += 1;

        let mut next = SpecSource::None;
        if !done {
            let block = layout.batch.block_rows(layout.chain_rows[a]);
            if !block.is_empty() {
                let req = DraftRequest {
                    verified: &state.verified,
                    inference: &inference,
                    block_rows: &block,
                    seed_token: chain_preds[a],
                };
                let (toks, source) = drafter.draft(&req)?;
                if toks.len() != k {
                    return Err(DecodeError::Invalid(format!(
                        "drafter returned {} tokens, expected {k}",
                        toks.len()
                    )));
                }
                state.speculated = toks;
                next = source;
            }
        }
        state.trace.push(StepTrace {
            speculated: spec.len(),
            accepted: a,
            emitted: emitted.len(),
            next,
        });
        if done {
            break;
        }
    }
    stats.generated = state.generated;
    stats.steps = state.steps;
    Ok(DecodeOutput {
        tokens: state.verified,
        prompt_len: prompt.len(),
        stats,
        trace: state.trace,
    })
}

/// Decodes every prompt independently, in parallel, preserving prompt order.
pub fn decode_suite<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    prompts: &[Vec<u32>],
    opts: &DecodeOptions,
) -> Result<Vec<DecodeOutput>> {
    prompts
        .par_iter()
        .map(|p| speculative_decode(model, sampler, p, opts))
        .collect()
}

fn build_layout(verified: &[u32], spec: &[u32], masks: &[u32], opts: &DecodeOptions) -> Result<InferenceLayout> {
    Ok(match opts.strategy {
        Strategy::Quadratic if !spec.is_empty() => {
            build_quadratic_inference_input(verified, spec, masks, opts.cover_reject_first)?
        }
        _ => build_linear_inference_input(verified, spec, masks)?,
    })
}

/// 1-based rank of each future token among the base logits at its mask row.
///
/// `true_future[j]` is compared at mask `m_{j+1}`, which predicts the token
/// `j + 2` places after the prompt. Ties rank the lower id first.
pub fn future_rank_probe<F: Scalar>(
    model: &ModelBundle<F>,
    prompt: &[u32],
    true_future: &[u32],
    k: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(DecodeError::Invalid("prompt must be nonempty".into()));
    }
    if true_future.len() > k {
        return Err(DecodeError::Invalid(format!(
            "{} future tokens exceed k = {k}",
            true_future.len()
        )));
    }
    let masks = mask_ids(model, k)?;
    let layout = build_linear_inference_input(prompt, &[], &masks)?;
    let out = model.infer(&layout.batch.forward_input())?;
    let block = layout.batch.block_rows(prompt.len() - 1);
    let vocab = model.config.vocab_size;
    true_future
        .iter()
        .zip(block)
        .map(|(&t, r)| {
            if t as usize >= vocab {
                return Err(DecodeError::Model(ModelError::Token { id: t, vocab }));
            }
            Ok(token_rank(out.logits.row(r), t as usize))
        })
        .collect()
}

/// `1 + #{v : l_v > l_t or (l_v == l_t and v < t)}`.
pub fn token_rank<F: Scalar>(logits: &[F], t: usize) -> usize {
    let lt = logits[t];
    1 + logits
        .iter()
        .enumerate()
        .filter(|&(v, &l)| l > lt || (l == lt && v < t))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_cases() {
        assert_eq!(
            verify_speculated(&[4, 4, 4, 9], &[4, 4, 4]).unwrap(),
            (3, vec![4, 4, 4, 9])
        );
        assert_eq!(verify_speculated(&[4, 9, 1, 1], &[4, 7, 2]).unwrap(), (1, vec![4, 9]));
        assert_eq!(verify_speculated(&[8, 0], &[3]).unwrap(), (0, vec![8]));
        assert_eq!(verify_speculated(&[5], &[]).unwrap(), (0, vec![5]));
        assert!(verify_speculated(&[1, 2], &[1, 2]).is_err());
    }

    #[test]
    fn rate_counts() {
        let s = AcceptanceStats {
            generated: 9,
            steps: 3,
            k_eval: 8,
            histogram: vec![0; 9],
        };
        assert_eq!(acceptance_rate(&s).unwrap(), 3.0);
        assert!(matches!(
            acceptance_rate(&AcceptanceStats::new(2)),
            Err(DecodeError::NoSteps)
        ));
    }

    #[test]
    fn rank_ties_and_max() {
        let l = [0.5, 2.0, 2.0, -1.0];
        assert_eq!(token_rank(&l, 1), 1);
        assert_eq!(token_rank(&l, 2), 2);
        assert_eq!(token_rank(&l, 0), 3);
        assert_eq!(token_rank(&l, 3), 4);
    }

    #[test]
    fn strategy_parse() {
        assert_eq!("linear".parse::<Strategy>().unwrap(), Strategy::Linear);
        assert_eq!("quadratic".parse::<Strategy>().unwrap(), Strategy::Quadratic);
        assert!("tree".parse::<Strategy>().is_err());
    }
}
