use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape and vocabulary layout of a model.
///
/// The last `k_masks` vocabulary ids are the mask tokens `m_1..m_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Total vocabulary including specials and mask ids. `0` means "derive from the corpus".
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub k_masks: usize,
    pub lora_rank: usize,
    /// Multiplier applied to the low-rank path (`alpha / r`).
    pub lora_scale: f64,
    pub max_position: usize,
    /// Initialize the unembedding from the token embedding table.
    pub tie_embeddings: bool,
    pub train_mask_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            k_masks: 4,
            lora_rank: 8,
            lora_scale: 2.0,
            max_position: 512,
            tie_embeddings: true,
            train_mask_embeddings: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.k_masks == 0 {
            return bad("k_masks must be at least 1".into());
        }
        if self.vocab_size <= self.k_masks {
            return bad(format!(
                "vocab_size {} must exceed k_masks {}",
                self.vocab_size, self.k_masks
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_position == 0 {
            return bad("n_layers, d_ff and max_position must be positive".into());
        }
        if !self.lora_scale.is_finite() {
            return bad("lora_scale must be finite".into());
        }
        Ok(())
    }

    /// Number of non-mask vocabulary ids.
    pub fn base_vocab(&self) -> usize {
        self.vocab_size - self.k_masks
    }

    /// Vocabulary id of mask `m_{j+1}` (`j` is zero-based).
    pub fn mask_id(&self, j: usize) -> u32 {
        assert!(j < self.k_masks, "mask index {j} out of range");
        (self.base_vocab() + j) as u32
    }

    pub fn is_mask(&self, id: u32) -> bool {
        (id as usize) >= self.base_vocab() && (id as usize) < self.vocab_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flat key/value form used in checkpoint headers.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("k_masks".into(), self.k_masks.to_string()),
            ("lora_rank".into(), self.lora_rank.to_string()),
            ("lora_scale".into(), format!("{:?}", self.lora_scale)),
            ("max_position".into(), self.max_position.to_string()),
            ("tie_embeddings".into(), self.tie_embeddings.to_string()),
            ("train_mask_embeddings".into(), self.train_mask_embeddings.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self, ModelError> {
        fn get<T: std::str::FromStr>(kv: &[(String, String)], key: &str) -> Result<T, ModelError> {
            let raw = kv
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing key {key}")))?;
            raw.parse()
                .map_err(|_| ModelError::InvalidConfig(format!("bad value for {key}: {raw:?}")))
        }
        let cfg = Self {
            vocab_size: get(kv, "vocab_size")?,
            d_model: get(kv, "d_model")?,
            n_layers: get(kv, "n_layers")?,
            n_heads: get(kv, "n_heads")?,
            d_ff: get(kv, "d_ff")?,
            k_masks: get(kv, "k_masks")?,
            lora_rank: get(kv, "lora_rank")?,
            lora_scale: get(kv, "lora_scale")?,
            max_position: get(kv, "max_position")?,
            tie_embeddings: get(kv, "tie_embeddings")?,
            train_mask_embeddings: get(kv, "train_mask_embeddings")?,
            seed: get(kv, "seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Human-readable list of differing fields, empty when equal.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        self.to_kv()
            .into_iter()
            .zip(other.to_kv())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, b)| format!("{}: {} != {}", a.0, a.1, b.1))
            .collect()
    }
}
