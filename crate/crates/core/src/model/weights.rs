//! Parameter containers shared by stored tensors and tape handles.
//!
//! Each container is generic over its slot type: `Tensor<F>` for storage and
//! [`Var`](crate::numerics::Var) once bound onto a tape. Names are stable and
//! double as checkpoint record names.

/// What a parameter is, which decides whether it trains in a given phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    /// Frozen base transformer weights (embeddings, projections, norms, unembedding).
    Base,
    /// Low-rank adapter factors.
    Lora,
    /// Embedding rows of the mask tokens.
    MaskEmbedding,
    /// Sampler head weights.
    Sampler,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormWeights<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[in × r]`
    pub a: T,
    /// `[r × out]`
    pub b: T,
}

/// Linear layer `y = W·x` (weight stored `[out × in]`) with an optional gated adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear<T> {
    pub weight: T,
    pub adapter: Option<LoraAdapter<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T> {
    pub attn_norm: NormWeights<T>,
    pub wq: LoraLinear<T>,
    pub wk: LoraLinear<T>,
    pub wv: LoraLinear<T>,
    pub wo: LoraLinear<T>,
    pub ffn_norm: NormWeights<T>,
    pub w_up: LoraLinear<T>,
    pub w_down: LoraLinear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    /// `[base_vocab × d]`
    pub token_embed: T,
    /// `[k × d]`
    pub mask_embed: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: NormWeights<T>,
    /// `[vocab × d]`
    pub unembed: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerWeights<T> {
    /// `[d × 2d]`
    pub w1: T,
    pub norm1: NormWeights<T>,
    /// `[d × d]`
    pub w2: T,
    pub norm2: NormWeights<T>,
}

impl<T> NormWeights<T> {
    fn visit<'a>(&'a self, p: &str, role: ParamRole, f: &mut impl FnMut(&str, ParamRole, &'a T)) {
        f(&format!("{p}.gain"), role, &self.gain);
        f(&format!("{p}.bias"), role, &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, role: ParamRole, f: &mut impl FnMut(&str, ParamRole, &'a mut T)) {
        f(&format!("{p}.gain"), role, &mut self.gain);
        f(&format!("{p}.bias"), role, &mut self.bias);
    }

    fn try_map<U, E>(
        &self,
        p: &str,
        role: ParamRole,
        f: &mut impl FnMut(&str, ParamRole, &T) -> Result<U, E>,
    ) -> Result<NormWeights<U>, E> {
        Ok(NormWeights {
            gain: f(&format!("{p}.gain"), role, &self.gain)?,
            bias: f(&format!("{p}.bias"), role, &self.bias)?,
        })
    }
}

impl<T> LoraLinear<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(&str, ParamRole, &'a T)) {
        f(&format!("{p}.weight"), ParamRole::Base, &self.weight);
        if let Some(ad) = &self.adapter {
            f(&format!("{p}.lora_a"), ParamRole::Lora, &ad.a);
            f(&format!("{p}.lora_b"), ParamRole::Lora, &ad.b);
        }
    }

    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut impl FnMut(&str, ParamRole, &'a mut T)) {
        f(&format!("{p}.weight"), ParamRole::Base, &mut self.weight);
        if let Some(ad) = &mut self.adapter {
            f(&format!("{p}.lora_a"), ParamRole::Lora, &mut ad.a);
            f(&format!("{p}.lora_b"), ParamRole::Lora, &mut ad.b);
        }
    }

    fn try_map<U, E>(
        &self,
        p: &str,
        f: &mut impl FnMut(&str, ParamRole, &T) -> Result<U, E>,
    ) -> Result<LoraLinear<U>, E> {
        let weight = f(&format!("{p}.weight"), ParamRole::Base, &self.weight)?;
        let adapter = match &self.adapter {
            Some(ad) => Some(LoraAdapter {
                a: f(&format!("{p}.lora_a"), ParamRole::Lora, &ad.a)?,
                b: f(&format!("{p}.lora_b"), ParamRole::Lora, &ad.b)?,
            }),
            None => None,
        };
        Ok(LoraLinear { weight, adapter })
    }
}

impl<T> BlockWeights<T> {
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(&str, ParamRole, &'a T)) {
        self.attn_norm.visit(&format!("{p}.attn_norm"), ParamRole::Base, f);
        self.wq.visit(&format!("{p}.attn.wq"), f);
        self.wk.visit(&format!("{p}.attn.wk"), f);
        self.wv.visit(&format!("{p}.attn.wv"), f);
        self.wo.visit(&format!("{p}.attn.wo"), f);
        self.ffn_norm.visit(&format!("{p}.ffn_norm"), ParamRole::Base, f);
        self.w_up.visit(&format!("{p}.ffn.w_up"), f);
        self.w_down.visit(&format!("{p}.ffn.w_down"), f);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, f: &mut impl FnMut(&str, ParamRole, &'a mut T)) {
        self.attn_norm.visit_mut(&format!("{p}.attn_norm"), ParamRole::Base, f);
        self.wq.visit_mut(&format!("{p}.attn.wq"), f);
        self.wk.visit_mut(&format!("{p}.attn.wk"), f);
        self.wv.visit_mut(&format!("{p}.attn.wv"), f);
        self.wo.visit_mut(&format!("{p}.attn.wo"), f);
        self.ffn_norm.visit_mut(&format!("{p}.ffn_norm"), ParamRole::Base, f);
        self.w_up.visit_mut(&format!("{p}.ffn.w_up"), f);
        self.w_down.visit_mut(&format!("{p}.ffn.w_down"), f);
    }

    fn try_map<U, E>(
        &self,
        p: &str,
        f: &mut impl FnMut(&str, ParamRole, &T) -> Result<U, E>,
    ) -> Result<BlockWeights<U>, E> {
        Ok(BlockWeights {
            attn_norm: self.attn_norm.try_map(&format!("{p}.attn_norm"), ParamRole::Base, f)?,
            wq: self.wq.try_map(&format!("{p}.attn.wq"), f)?,
            wk: self.wk.try_map(&format!("{p}.attn.wk"), f)?,
            wv: self.wv.try_map(&format!("{p}.attn.wv"), f)?,
            wo: self.wo.try_map(&format!("{p}.attn.wo"), f)?,
            ffn_norm: self.ffn_norm.try_map(&format!("{p}.ffn_norm"), ParamRole::Base, f)?,
            w_up: self.w_up.try_map(&format!("{p}.ffn.w_up"), f)?,
            w_down: self.w_down.try_map(&format!("{p}.ffn.w_down"), f)?,
        })
    }
}

impl<T> ModelWeights<T> {
    /// Visits every parameter in a fixed order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, ParamRole, &'a T)) {
        f("embed.tokens", ParamRole::Base, &self.token_embed);
        f("embed.masks", ParamRole::MaskEmbedding, &self.mask_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("layers.{i}"), &mut f);
        }
        self.final_norm.visit("final_norm", ParamRole::Base, &mut f);
        f("unembed", ParamRole::Base, &self.unembed);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, ParamRole, &'a mut T)) {
        f("embed.tokens", ParamRole::Base, &mut self.token_embed);
        f("embed.masks", ParamRole::MaskEmbedding, &mut self.mask_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("layers.{i}"), &mut f);
        }
        self.final_norm.visit_mut("final_norm", ParamRole::Base, &mut f);
        f("unembed", ParamRole::Base, &mut self.unembed);
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, ParamRole, &T) -> Result<U, E>) -> Result<ModelWeights<U>, E> {
        let token_embed = f("embed.tokens", ParamRole::Base, &self.token_embed)?;
        let mask_embed = f("embed.masks", ParamRole::MaskEmbedding, &self.mask_embed)?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("layers.{i}"), &mut f))
            .collect::<Result<_, E>>()?;
        let final_norm = self.final_norm.try_map("final_norm", ParamRole::Base, &mut f)?;
        let unembed = f("unembed", ParamRole::Base, &self.unembed)?;
        Ok(ModelWeights {
            token_embed,
            mask_embed,
            blocks,
            final_norm,
            unembed,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, ParamRole, &T) -> U) -> ModelWeights<U> {
        self.try_map::<U, std::convert::Infallible>(|n, r, t| Ok(f(n, r, t)))
            .unwrap_or_else(|e| match e {})
    }
}

impl<T> SamplerWeights<T> {
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, ParamRole, &'a T)) {
        f("sampler.w1", ParamRole::Sampler, &self.w1);
        self.norm1.visit("sampler.norm1", ParamRole::Sampler, &mut f);
        f("sampler.w2", ParamRole::Sampler, &self.w2);
        self.norm2.visit("sampler.norm2", ParamRole::Sampler, &mut f);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, ParamRole, &'a mut T)) {
        f("sampler.w1", ParamRole::Sampler, &mut self.w1);
        self.norm1.visit_mut("sampler.norm1", ParamRole::Sampler, &mut f);
        f("sampler.w2", ParamRole::Sampler, &mut self.w2);
        self.norm2.visit_mut("sampler.norm2", ParamRole::Sampler, &mut f);
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&str, ParamRole, &T) -> Result<U, E>,
    ) -> Result<SamplerWeights<U>, E> {
        Ok(SamplerWeights {
            w1: f("sampler.w1", ParamRole::Sampler, &self.w1)?,
            norm1: self.norm1.try_map("sampler.norm1", ParamRole::Sampler, &mut f)?,
            w2: f("sampler.w2", ParamRole::Sampler, &self.w2)?,
            norm2: self.norm2.try_map("sampler.norm2", ParamRole::Sampler, &mut f)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, ParamRole, &T) -> U) -> SamplerWeights<U> {
        self.try_map::<U, std::convert::Infallible>(|n, r, t| Ok(f(n, r, t)))
            .unwrap_or_else(|e| match e {})
    }
}
