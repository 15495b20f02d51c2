//! Two-block MLP head that turns `[embedding of previous token; hidden]` into
//! logits through the frozen unembedding, so jointly predicted tokens are
//! conditioned on the token chosen just before them.

use crate::model::{ModelBundle, ModelError, NormWeights, SamplerWeights};
use crate::numerics::{argmax, normal_tensor, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerHead<F> {
    pub weights: SamplerWeights<Tensor<F>>,
}

/// Sampler weights plus the shared embedding and unembedding, recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundSampler<'w> {
    pub head: &'w SamplerWeights<Var>,
    pub embed_table: Var,
    pub unembed: Var,
}

impl<F: Scalar> SamplerHead<F> {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let d = d_model;
        let norm = || NormWeights {
            gain: Tensor::full(&[d], F::one()),
            bias: Tensor::zeros(&[d]),
        };
        Self {
            weights: SamplerWeights {
                w1: normal_tensor(seed, "sampler.w1", &[d, 2 * d], 1.0 / ((2 * d) as f64).sqrt()),
                norm1: norm(),
                w2: normal_tensor(seed, "sampler.w2", &[d, d], 1.0 / (d as f64).sqrt()),
                norm2: norm(),
            },
        }
    }

    pub fn cast<G: Scalar>(&self) -> SamplerHead<G> {
        SamplerHead {
            weights: self.weights.map(|_, _, t| t.cast()),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.weights.visit(|_, _, t| n += t.len());
        n
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> SamplerWeights<Var> {
        self.weights.map(|_, _, t| tape.leaf(t.clone(), trainable))
    }
}

/// Sampler logits `[n × V]` for rows of `z` with the given previous tokens.
pub fn sampler_logits_vars<F: Scalar>(
    tape: &mut Tape<F>,
    s: BoundSampler<'_>,
    prev: &[usize],
    z: Var,
) -> Result<Var, ModelError> {
    let e = tape.gather_rows(s.embed_table, prev)?;
    let x = tape.concat_cols(e, z)?;
    let h = tape.matmul_t(x, s.head.w1)?;
    let h = tape.silu(h)?;
    let h = tape.layer_norm(h, s.head.norm1.gain, s.head.norm1.bias)?;
    let h = tape.matmul_t(h, s.head.w2)?;
    let h = tape.silu(h)?;
    let h = tape.layer_norm(h, s.head.norm2.gain, s.head.norm2.bias)?;
    Ok(tape.matmul_t(h, s.unembed)?)
}

struct ChainContext<F> {
    tape: Tape<F>,
    head: SamplerWeights<Var>,
    embed_table: Var,
    unembed: Var,
}

impl<F: Scalar> ChainContext<F> {
    fn new(head: &SamplerHead<F>, model: &ModelBundle<F>) -> Result<Self, ModelError> {
        let mut tape = Tape::new();
        let w = &model.weights;
        let tok = tape.constant(w.token_embed.clone());
        let masks = tape.constant(w.mask_embed.clone());
        let embed_table = tape.concat_rows(tok, masks)?;
        let unembed = tape.constant(w.unembed.clone());
        let head = head.bind(&mut tape, false);
        Ok(Self {
            tape,
            head,
            embed_table,
            unembed,
        })
    }

    fn logits(&mut self, model: &ModelBundle<F>, prev: u32, z: &[F]) -> Result<Vec<F>, ModelError> {
        let vocab = model.config.vocab_size;
        if prev as usize >= vocab {
            return Err(ModelError::Token { id: prev, vocab });
        }
        if z.len() != model.config.d_model {
            return Err(ModelError::Input(format!(
                "hidden width {} != d_model {}",
                z.len(),
                model.config.d_model
            )));
        }
        let zv = self
            .tape
            .constant(Tensor::new(vec![1, z.len()], z.to_vec()).map_err(ModelError::from)?);
        let bound = BoundSampler {
            head: &self.head,
            embed_table: self.embed_table,
            unembed: self.unembed,
        };
        let out = sampler_logits_vars(&mut self.tape, bound, &[prev as usize], zv)?;
        Ok(self.tape.value(out).data().to_vec())
    }
}

/// Sampler logits for one hidden vector conditioned on `prev_token`.
pub fn sampler_logits<F: Scalar>(
    head: &SamplerHead<F>,
    model: &ModelBundle<F>,
    prev_token: u32,
    z: &[F],
) -> Result<Vec<F>, ModelError> {
    ChainContext::new(head, model)?.logits(model, prev_token, z)
}

/// Greedy chain `y_1 = argmax S(seed, z_1)`, `y_{j+1} = argmax S(y_j, z_{j+1})`.
pub fn sampler_chain<F: Scalar>(
    head: &SamplerHead<F>,
    model: &ModelBundle<F>,
    seed_token: u32,
    zs: &[&[F]],
) -> Result<Vec<u32>, ModelError> {
    let mut ctx = ChainContext::new(head, model)?;
    let mut prev = seed_token;
    let mut out = Vec::with_capacity(zs.len());
    for z in zs {
        let logits = ctx.logits(model, prev, z)?;
        prev = argmax(&logits) as u32;
        out.push(prev);
    }
    Ok(out)
}
