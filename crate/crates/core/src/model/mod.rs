//! Decoder-only transformer whose linear layers are gated-LoRA linears.
//!
//! Blocks are pre-norm (attention then SiLU feed-forward), positions are
//! sinusoidal and indexed by explicit position ids so mask rows can reuse
//! positions of other rows. Attention follows an arbitrary [`AllowedSet`].

mod config;
mod lora;
pub mod weights;

pub use config::ModelConfig;
pub use lora::gated_lora_apply;
pub use weights::{BlockWeights, LoraAdapter, LoraLinear, ModelWeights, NormWeights, ParamRole, SamplerWeights};

use std::sync::Arc;

use thiserror::Error;

use crate::numerics::{normal_tensor, AllowedSet, NumericsError, Scalar, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("position id {pos} exceeds max_position {max}")]
    Position { pos: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: u32, vocab: usize },
    #[error("malformed input: {0}")]
    Input(String),
}

/// One forward request: tokens with explicit positions, attention sets and LoRA gate.
#[derive(Clone, Debug)]
pub struct ForwardInput<'a> {
    pub tokens: &'a [u32],
    pub positions: &'a [usize],
    pub allowed: Arc<AllowedSet>,
    pub gate: &'a [bool],
}

/// Tape handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Final-norm hidden states `[T × d]`.
    pub hidden: Var,
    /// Base-head logits `[T × V]`.
    pub logits: Var,
    /// Full input embedding table `[V × d]` (token rows then mask rows).
    pub embed_table: Var,
}

/// Materialized outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub hidden: Tensor<F>,
    pub logits: Tensor<F>,
}

/// Base transformer weights plus adapters and mask embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F> {
    pub config: ModelConfig,
    pub weights: ModelWeights<Tensor<F>>,
}

fn lora_linear<F: Scalar>(
    seed: u64,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    std: f64,
    rank: usize,
) -> LoraLinear<Tensor<F>> {
    let weight = normal_tensor(seed, &format!("{name}.weight"), &[out_dim, in_dim], std);
    let adapter = (rank > 0).then(|| LoraAdapter {
        a: normal_tensor(
            seed,
            &format!("{name}.lora_a"),
            &[in_dim, rank],
            1.0 / (in_dim as f64).sqrt(),
        ),
        b: Tensor::zeros(&[rank, out_dim]),
    });
    LoraLinear { weight, adapter }
}

fn norm<F: Scalar>(d: usize) -> NormWeights<Tensor<F>> {
    NormWeights {
        gain: Tensor::full(&[d], F::one()),
        bias: Tensor::zeros(&[d]),
    }
}

/// Sinusoidal encoding rows for the given positions.
pub fn positional_encoding<F: Scalar>(positions: &[usize], d: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64_lossy(v));
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("shape matches")
}

impl<F: Scalar> ModelBundle<F> {
    /// Fresh model: scaled-normal base weights, `B = 0` adapters, random mask rows.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let s = c.seed;
        let d = c.d_model;
        let r = c.lora_rank;
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = in_std / (2.0 * c.n_layers as f64).sqrt();
        let ff_out_std = 1.0 / (c.d_ff as f64).sqrt() / (2.0 * c.n_layers as f64).sqrt();
        let blocks = (0..c.n_layers)
            .map(|i| {
                let p = format!("layers.{i}");
                BlockWeights {
                    attn_norm: norm(d),
                    wq: lora_linear(s, &format!("{p}.attn.wq"), d, d, in_std, r),
                    wk: lora_linear(s, &format!("{p}.attn.wk"), d, d, in_std, r),
                    wv: lora_linear(s, &format!("{p}.attn.wv"), d, d, in_std, r),
                    wo: lora_linear(s, &format!("{p}.attn.wo"), d, d, out_std, r),
                    ffn_norm: norm(d),
                    w_up: lora_linear(s, &format!("{p}.ffn.w_up"), c.d_ff, d, in_std, r),
                    w_down: lora_linear(s, &format!("{p}.ffn.w_down"), d, c.d_ff, ff_out_std, r),
                }
            })
            .collect();
        let token_embed: Tensor<F> = normal_tensor(s, "embed.tokens", &[c.base_vocab(), d], EMBED_STD);
        let mask_embed: Tensor<F> = normal_tensor(s, "embed.masks", &[c.k_masks, d], EMBED_STD);
        let unembed = if c.tie_embeddings {
            let mut data = token_embed.data().to_vec();
            data.extend_from_slice(mask_embed.data());
            Tensor::new(vec![c.vocab_size, d], data)?
        } else {
            normal_tensor(s, "unembed", &[c.vocab_size, d], EMBED_STD)
        };
        Ok(Self {
            config: c.clone(),
            weights: ModelWeights {
                token_embed,
                mask_embed,
                blocks,
                final_norm: norm(d),
                unembed,
            },
        })
    }

    /// Converts every weight to another element type.
    pub fn cast<G: Scalar>(&self) -> ModelBundle<G> {
        ModelBundle {
            config: self.config.clone(),
            weights: self.weights.map(|_, _, t| t.cast()),
        }
    }

    /// Replaces mask embedding rows with fresh random vectors drawn from `seed`.
    pub fn reseed_mask_embeddings(&mut self, seed: u64) {
        self.weights.mask_embed = normal_tensor(
            seed,
            "embed.masks",
            &[self.config.k_masks, self.config.d_model],
            EMBED_STD,
        );
    }

    /// Copy of this model with adapters of a new rank (`B = 0`, so outputs are unchanged).
    pub fn with_lora_rank(&self, rank: usize, seed: u64) -> Self {
        let mut config = self.config.clone();
        config.lora_rank = rank;
        let mut weights = self.weights.clone();
        for (i, b) in weights.blocks.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            let layers: [(&mut LoraLinear<Tensor<F>>, String); 6] = [
                (&mut b.wq, format!("{p}.attn.wq")),
                (&mut b.wk, format!("{p}.attn.wk")),
                (&mut b.wv, format!("{p}.attn.wv")),
                (&mut b.wo, format!("{p}.attn.wo")),
                (&mut b.w_up, format!("{p}.ffn.w_up")),
                (&mut b.w_down, format!("{p}.ffn.w_down")),
            ];
            for (layer, name) in layers {
                let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
                layer.adapter = (rank > 0).then(|| LoraAdapter {
                    a: normal_tensor(
                        seed,
                        &format!("{name}.lora_a"),
                        &[in_dim, rank],
                        1.0 / (in_dim as f64).sqrt(),
                    ),
                    b: Tensor::zeros(&[rank, out_dim]),
                });
            }
        }
        Self { config, weights }
    }

    /// Total element count of parameters with the given role.
    pub fn param_count(&self, role: ParamRole) -> usize {
        let mut n = 0;
        self.weights.visit(|_, r, t| {
            if r == role {
                n += t.len();
            }
        });
        n
    }

    /// Records every weight on `tape`; `trainable` decides which receive gradients.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(ParamRole) -> bool) -> ModelWeights<Var> {
        self.weights.map(|_, role, t| tape.leaf(t.clone(), trainable(role)))
    }

    /// Forward pass returning materialized hidden states and logits.
    pub fn infer(&self, input: &ForwardInput<'_>) -> Result<Inference<F>, ModelError> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, |_| false);
        let out = forward(&self.config, &mut tape, &w, input)?;
        Ok(Inference {
            hidden: tape.value(out.hidden).clone(),
            logits: tape.value(out.logits).clone(),
        })
    }
}

fn check_input(config: &ModelConfig, input: &ForwardInput<'_>) -> Result<(), ModelError> {
    let t = input.tokens.len();
    if t == 0 {
        return Err(ModelError::Input("empty token list".into()));
    }
    if input.positions.len() != t || input.gate.len() != t || input.allowed.len() != t {
        return Err(ModelError::Input(format!(
            "length mismatch: tokens {t}, positions {}, gate {}, attention rows {}",
            input.positions.len(),
            input.gate.len(),
            input.allowed.len()
        )));
    }
    if let Some(&id) = input.tokens.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::Token {
            id,
            vocab: config.vocab_size,
        });
    }
    if let Some(&pos) = input.positions.iter().find(|&&p| p >= config.max_position) {
        return Err(ModelError::Position {
            pos,
            max: config.max_position,
        });
    }
    Ok(())
}

/// Transformer forward over bound weights.
pub fn forward<F: Scalar>(
    config: &ModelConfig,
    tape: &mut Tape<F>,
    w: &ModelWeights<Var>,
    input: &ForwardInput<'_>,
) -> Result<ForwardVars, ModelError> {
    check_input(config, input)?;
    let scale = F::from_f64_lossy(config.lora_scale);
    let gate = input.gate;
    let table = tape.concat_rows(w.token_embed, w.mask_embed)?;
    let ids: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
    let tok = tape.gather_rows(table, &ids)?;
    let pos = tape.constant(positional_encoding(input.positions, config.d_model));
    let mut h = tape.add(tok, pos)?;
    for block in &w.blocks {
        let a = tape.layer_norm(h, block.attn_norm.gain, block.attn_norm.bias)?;
        let q = gated_lora_apply(tape, &block.wq, a, gate, scale)?;
        let k = gated_lora_apply(tape, &block.wk, a, gate, scale)?;
        let v = gated_lora_apply(tape, &block.wv, a, gate, scale)?;
        let att = tape.attention(q, k, v, config.n_heads, input.allowed.clone())?;
        let o = gated_lora_apply(tape, &block.wo, att, gate, scale)?;
        h = tape.add(h, o)?;
        let f = tape.layer_norm(h, block.ffn_norm.gain, block.ffn_norm.bias)?;
        let up = gated_lora_apply(tape, &block.w_up, f, gate, scale)?;
        let act = tape.silu(up)?;
        let down = gated_lora_apply(tape, &block.w_down, act, gate, scale)?;
        h = tape.add(h, down)?;
    }
    let hidden = tape.layer_norm(h, w.final_norm.gain, w.final_norm.bias)?;
    let logits = tape.matmul_t(hidden, w.unembed)?;
    Ok(ForwardVars {
        hidden,
        logits,
        embed_table: table,
    })
}
