use serde::{Deserialize, Serialize};

use super::corpus::CorpusSpec;
use super::optim::AdamWConfig;
use super::TrainError;
use crate::decoding::Strategy;
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// How the adapter gate is set during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraMode {
    /// Adapters act on mask rows only.
    Gated,
    /// Adapters act on every row.
    Standard,
}

/// Previous-token input the sampler is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrevTokenSource {
    Gold,
    /// Reserved; rejected by validation.
    #[serde(rename = "self")]
    SelfSampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Full-parameter next-token training of the base model before fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            warmup: 50,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch_size: usize,
    pub lora_mode: LoraMode,
    /// Train and use the sampler head.
    pub sampler: bool,
    pub prev_token_source: PrevTokenSource,
    pub weights: LossWeights,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 2e-4,
            warmup: 200,
            batch_size: 8,
            lora_mode: LoraMode::Gated,
            sampler: true,
            prev_token_source: PrevTokenSource::Gold,
            weights: LossWeights::default(),
        }
    }
}

/// Periodic acceptance-rate evaluation on held-out prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Steps between evaluations; `0` disables them.
    pub every: usize,
    pub prompts: usize,
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    /// `0` means `k_masks`.
    pub k_eval: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            every: 500,
            prompts: 16,
            max_new_tokens: 32,
            strategy: Strategy::Quadratic,
            k_eval: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seed for batch order and fresh adapter/sampler weights.
    pub seed: u64,
    pub precision: Precision,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub optim: AdamWConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            optim: AdamWConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, TrainError> {
        toml::to_string(self).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.corpus.validate()?;
        let f = &self.finetune;
        if !(f.lr > 0.0 && f.lr.is_finite()) {
            return bad(format!("finetune.lr must be > 0, got {}", f.lr));
        }
        if f.warmup > f.steps {
            return bad(format!("finetune.warmup {} exceeds steps {}", f.warmup, f.steps));
        }
        if f.batch_size == 0 {
            return bad("finetune.batch_size must be positive".into());
        }
        if f.prev_token_source == PrevTokenSource::SelfSampled {
            return bad("finetune.prev_token_source = \"self\" is not supported".into());
        }
        f.weights.validate().map_err(TrainError::Config)?;
        let p = &self.pretrain;
        if p.steps > 0 {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return bad(format!("pretrain.lr must be > 0, got {}", p.lr));
            }
            if p.warmup > p.steps {
                return bad(format!("pretrain.warmup {} exceeds steps {}", p.warmup, p.steps));
            }
            if p.batch_size == 0 {
                return bad("pretrain.batch_size must be positive".into());
            }
        }
        if self.eval.k_eval > self.model.k_masks {
            return bad(format!(
                "eval.k_eval {} exceeds model.k_masks {}",
                self.eval.k_eval, self.model.k_masks
            ));
        }
        Ok(())
    }
}
