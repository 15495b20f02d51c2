//! Base pretraining, mask fine-tuning, optimizer and checkpoint I/O.
//!
//! Fine-tuning keeps every base weight frozen and trains only the adapters, the
//! mask embedding rows and the sampler head. Per-step gradients are computed for
//! each sequence on its own tape (in parallel) and summed in sequence order, so
//! runs are reproducible regardless of thread count.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod optim;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::batching::{build_training_batch, BatchError, MaskedBatch, IGNORE};
use crate::decoding::{acceptance_rate, decode_suite, DecodeError, DecodeOptions, Strategy};
use crate::losses::{compute_losses, ntp_only_ce, LossReport, LossWeights};
use crate::model::{forward, ForwardInput, ModelBundle, ModelConfig, ModelError, ParamRole};
use crate::numerics::{derive_rng, derive_seed, AllowedSet, NumericsError, Scalar, Tape, Tensor, Var};
use crate::sampler::{BoundSampler, SamplerHead};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{EvalConfig, FinetuneConfig, LoraMode, Precision, PretrainConfig, TrainConfig};
pub use corpus::{generate_corpus, held_out_prompts, Corpus, CorpusSpec, Example, Prompt, Task, Vocab};
pub use optim::{lr_at, AdamW, AdamWConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {actual:016x})")]
    Checksum { stored: u64, actual: u64 },
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint config differs: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub report: LossReport,
    pub ntp_only_ce: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,base_ce,sampler_ce,lcm,total,ntp_only_ce,lr,wall_ms";

    /// Values print in shortest round-trip form so logs compare exactly.
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:.3}",
            self.step, r.base_ce, r.sampler_ce, r.lcm, r.total, self.ntp_only_ce, self.lr, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub strategy: Strategy,
    pub k_eval: usize,
    pub mean_rate: f64,
    pub prompts: usize,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "step,strategy,k_eval,mean_rate,prompts";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:?},{}",
            self.step,
            self.strategy.name(),
            self.k_eval,
            self.mean_rate,
            self.prompts
        )
    }
}

pub enum TrainEvent<'a> {
    Pretrain(&'a StepMetrics),
    Step(&'a StepMetrics),
    Eval(&'a EvalRecord),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<F> {
    pub model: ModelBundle<F>,
    pub sampler: Option<SamplerHead<F>>,
    pub vocab: Vocab,
    pub pretrain_log: Vec<StepMetrics>,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
}

/// Which parameters a fine-tuning run updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneSetup {
    pub lora_mode: LoraMode,
    pub use_sampler: bool,
    pub train_mask_embeddings: bool,
    pub weights: LossWeights,
}

impl FinetuneSetup {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            lora_mode: cfg.finetune.lora_mode,
            use_sampler: cfg.finetune.sampler,
            train_mask_embeddings: cfg.model.train_mask_embeddings,
            weights: cfg.finetune.weights,
        }
    }

    pub fn trains(&self, role: ParamRole) -> bool {
        match role {
            ParamRole::Base => false,
            ParamRole::Lora => true,
            ParamRole::MaskEmbedding => self.train_mask_embeddings,
            ParamRole::Sampler => self.use_sampler,
        }
    }

    /// Gate for a batch: mask rows only, or every row in the standard ablation.
    pub fn gate(&self, batch: &MaskedBatch) -> Vec<bool> {
        match self.lora_mode {
            LoraMode::Gated => batch.gate.clone(),
            LoraMode::Standard => vec![true; batch.len()],
        }
    }
}

fn is_pretrain_role(role: ParamRole) -> bool {
    role == ParamRole::Base
}

/// Copies of the selected tensors, model first then sampler, in visit order.
pub fn trainable_tensors<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    select: impl Fn(ParamRole) -> bool,
) -> Vec<Tensor<F>> {
    let mut out = Vec::new();
    model.weights.visit(|_, r, t| {
        if select(r) {
            out.push(t.clone())
        }
    });
    if let Some(s) = sampler {
        s.weights.visit(|_, r, t| {
            if select(r) {
                out.push(t.clone())
            }
        });
    }
    out
}

/// Mutable handles in the same order as [`trainable_tensors`].
pub fn trainable_tensors_mut<'a, F: Scalar>(
    model: &'a mut ModelBundle<F>,
    sampler: Option<&'a mut SamplerHead<F>>,
    select: impl Fn(ParamRole) -> bool,
) -> Vec<&'a mut Tensor<F>> {
    let mut out = Vec::new();
    model.weights.visit_mut(|_, r, t| {
        if select(r) {
            out.push(t)
        }
    });
    if let Some(s) = sampler {
        s.weights.visit_mut(|_, r, t| {
            if select(r) {
                out.push(t)
            }
        });
    }
    out
}

fn grads_of<F: Scalar>(tape: &Tape<F>, vars: &[Var]) -> Vec<Tensor<F>> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        })
        .collect()
}

fn selected_vars(
    model: &crate::model::ModelWeights<Var>,
    sampler: Option<&crate::model::SamplerWeights<Var>>,
    select: impl Fn(ParamRole) -> bool,
) -> Vec<Var> {
    let mut out = Vec::new();
    model.visit(|_, r, &v| {
        if select(r) {
            out.push(v)
        }
    });
    if let Some(s) = sampler {
        s.visit(|_, r, &v| {
            if select(r) {
                out.push(v)
            }
        });
    }
    out
}

/// Fine-tuning loss of one sequence and gradients of the trainable tensors.
pub fn finetune_example<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    example: &Example,
    setup: &FinetuneSetup,
) -> Result<(LossReport, Vec<Tensor<F>>)> {
    let masks: Vec<u32> = (0..model.config.k_masks).map(|j| model.config.mask_id(j)).collect();
    let batch = build_training_batch(&example.tokens, &example.loss_flags, &masks)?;
    let mut tape = Tape::new();
    let sel = |r| setup.trains(r);
    let w = model.bind(&mut tape, sel);
    let sw = match (setup.use_sampler, sampler) {
        (true, Some(s)) => Some(s.bind(&mut tape, true)),
        (true, None) => {
            return Err(TrainError::Config(
                "sampler training requested without a sampler".into(),
            ))
        }
        _ => None,
    };
    let gate = setup.gate(&batch);
    let input = ForwardInput {
        tokens: &batch.tokens,
        positions: &batch.position_ids,
        allowed: batch.attention.clone(),
        gate: &gate,
    };
    let fwd = forward(&model.config, &mut tape, &w, &input)?;
    let bound = sw.as_ref().map(|head| BoundSampler {
        head,
        embed_table: fwd.embed_table,
        unembed: w.unembed,
    });
    let (vars, report) = compute_losses(&mut tape, &batch, &fwd, bound, &setup.weights)?;
    tape.backward(vars.total).map_err(ModelError::from)?;
    let params = selected_vars(&w, sw.as_ref(), sel);
    Ok((report, grads_of(&tape, &params)))
}

/// NTP-only cross-entropy of a sequence under the setup's gate, without gradients.
pub fn probe_ntp_ce<F: Scalar>(model: &ModelBundle<F>, example: &Example, setup: &FinetuneSetup) -> Result<f64> {
    let masks: Vec<u32> = (0..model.config.k_masks).map(|j| model.config.mask_id(j)).collect();
    let batch = build_training_batch(&example.tokens, &example.loss_flags, &masks)?;
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, |_| false);
    let gate = setup.gate(&batch);
    let input = ForwardInput {
        tokens: &batch.tokens,
        positions: &batch.position_ids,
        allowed: batch.attention.clone(),
        gate: &gate,
    };
    let fwd = forward(&model.config, &mut tape, &w, &input)?;
    let ce = ntp_only_ce(&mut tape, &batch, fwd.logits)?;
    Ok(tape.value(ce).item().as_f64())
}

/// Plain causal next-token loss over every position, with base-parameter gradients.
pub fn pretrain_example<F: Scalar>(model: &ModelBundle<F>, example: &Example) -> Result<(f64, Vec<Tensor<F>>)> {
    let n = example.tokens.len();
    let positions: Vec<usize> = (0..n).collect();
    let gate = vec![false; n];
    let labels: Vec<u32> = (0..n)
        .map(|i| if i + 1 < n { example.tokens[i + 1] } else { IGNORE })
        .collect();
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, is_pretrain_role);
    let input = ForwardInput {
        tokens: &example.tokens,
        positions: &positions,
        allowed: Arc::new(AllowedSet::causal(n)),
        gate: &gate,
    };
    let fwd = forward(&model.config, &mut tape, &w, &input)?;
    let ce = tape
        .cross_entropy(fwd.logits, &labels, IGNORE)
        .map_err(ModelError::from)?;
    tape.backward(ce).map_err(ModelError::from)?;
    let params = selected_vars(&w, None, is_pretrain_role);
    Ok((tape.value(ce).item().as_f64(), grads_of(&tape, &params)))
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
    )
}

/// Sums per-sequence gradients in order and divides by the count.
fn mean_grads<F: Scalar>(per_example: Vec<Vec<Tensor<F>>>) -> Vec<Tensor<F>> {
    let count = F::from_usize(per_example.len()).expect("fits");
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().expect("nonempty batch");
    for g in iter {
        for (a, b) in acc.iter_mut().zip(g) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + *y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x = *x / count;
        }
    }
    acc
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut out = LossReport::default();
    for r in reports {
        out.base_ce += r.base_ce;
        out.sampler_ce += r.sampler_ce;
        out.lcm += r.lcm;
        out.total += r.total;
        out.ntp_rows += r.ntp_rows;
        out.mtp_rows += r.mtp_rows;
        out.lcm_anchors += r.lcm_anchors;
    }
    out.base_ce /= n;
    out.sampler_ce /= n;
    out.lcm /= n;
    out.total /= n;
    out
}

/// Tracks the loss against the divergence rule.
struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_STREAK: usize = 50;

impl DivergenceGuard {
    fn new() -> Self {
        Self {
            initial: None,
            streak: 0,
        }
    }

    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(TrainError::Divergence {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.streak += 1;
            if self.streak >= DIVERGENCE_STREAK {
                return Err(TrainError::Divergence {
                    step,
                    reason: format!(
                        "loss {loss} above {DIVERGENCE_FACTOR}x initial {initial} for {DIVERGENCE_STREAK} steps"
                    ),
                });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

fn batch_indices(seed: u64, stream: &str, steps: usize, batch: usize, n: usize) -> Vec<Vec<usize>> {
    let mut rng = derive_rng(seed, stream);
    (0..steps)
        .map(|_| (0..batch).map(|_| rng.random_range(0..n)).collect())
        .collect()
}

fn wrap_non_finite(step: usize, e: TrainError) -> TrainError {
    if is_non_finite(&e) {
        TrainError::Divergence {
            step,
            reason: e.to_string(),
        }
    } else {
        e
    }
}

/// Full-parameter next-token training of the base model.
pub fn pretrain_base<F: Scalar>(
    model: &mut ModelBundle<F>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<Vec<StepMetrics>> {
    let p = &cfg.pretrain;
    let order = batch_indices(
        cfg.seed,
        "pretrain.batches",
        p.steps,
        p.batch_size,
        corpus.examples.len(),
    );
    let mut opt = AdamW::new(
        cfg.optim,
        &trainable_tensors_mut(model, None, is_pretrain_role)
            .iter()
            .map(|t| &**t)
            .collect::<Vec<_>>(),
    );
    let mut guard = DivergenceGuard::new();
    let mut log = Vec::with_capacity(p.steps);
    for (step, idx) in order.iter().enumerate() {
        let start = Instant::now();
        let results: Vec<(f64, Vec<Tensor<F>>)> = idx
            .par_iter()
            .map(|&i| pretrain_example(model, &corpus.examples[i]))
            .collect::<Result<_>>()
            .map_err(|e| wrap_non_finite(step, e))?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
        guard.check(step, loss)?;
        let grads = mean_grads(results.into_iter().map(|r| r.1).collect());
        let lr = lr_at(p.lr, p.warmup, step);
        let grad_refs: Vec<&Tensor<F>> = grads.iter().collect();
        opt.step(
            &mut trainable_tensors_mut(model, None, is_pretrain_role),
            &grad_refs,
            lr,
        )?;
        let m = StepMetrics {
            step,
            report: LossReport {
                base_ce: loss,
                total: loss,
                ..LossReport::default()
            },
            ntp_only_ce: loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_event(TrainEvent::Pretrain(&m));
        log.push(m);
    }
    Ok(log)
}

/// Mean acceptance rate of `strategy` over `prompts`.
pub fn evaluate_rate<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    prompts: &[Vec<u32>],
    opts: &DecodeOptions,
) -> Result<f64> {
    let outs = decode_suite(model, sampler, prompts, opts)?;
    let mut sum = 0.0;
    for o in &outs {
        sum += acceptance_rate(&o.stats)?;
    }
    Ok(sum / outs.len().max(1) as f64)
}

/// Fine-tunes adapters, mask embeddings and sampler with the base frozen.
#[allow(clippy::too_many_arguments)]
pub fn finetune<F: Scalar>(
    model: &mut ModelBundle<F>,
    mut sampler: Option<&mut SamplerHead<F>>,
    corpus: &Corpus,
    probe: &[Example],
    eval_prompts: &[Vec<u32>],
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(Vec<StepMetrics>, Vec<EvalRecord>)> {
    let f = &cfg.finetune;
    let setup = FinetuneSetup::from_config(cfg);
    let sel = |r| setup.trains(r);
    let order = batch_indices(
        cfg.seed,
        "finetune.batches",
        f.steps,
        f.batch_size,
        corpus.examples.len(),
    );
    let initial = trainable_tensors(model, sampler.as_deref(), sel);
    let mut opt = AdamW::new(cfg.optim, &initial.iter().collect::<Vec<_>>());
    drop(initial);
    let k_eval = if cfg.eval.k_eval == 0 {
        model.config.k_masks
    } else {
        cfg.eval.k_eval
    };
    let mut guard = DivergenceGuard::new();
    let mut log = Vec::with_capacity(f.steps);
    let mut evals = Vec::new();
    let mut eval_opts = DecodeOptions::new(k_eval, cfg.eval.strategy, cfg.eval.max_new_tokens);
    eval_opts.eos = Some(corpus::EOS);
    for (step, idx) in order.iter().enumerate() {
        let start = Instant::now();
        let results: Vec<(LossReport, Vec<Tensor<F>>)> = {
            let (m, s) = (&*model, sampler.as_deref());
            idx.par_iter()
                .map(|&i| finetune_example(m, s, &corpus.examples[i], &setup))
                .collect::<Result<_>>()
                .map_err(|e| wrap_non_finite(step, e))?
        };
        let reports: Vec<LossReport> = results.iter().map(|r| r.0).collect();
        let report = mean_report(&reports);
        guard.check(step, report.total)?;
        let ntp = probe
            .iter()
            .map(|ex| probe_ntp_ce(model, ex, &setup))
            .collect::<Result<Vec<f64>>>()?;
        let ntp_only = ntp.iter().sum::<f64>() / ntp.len().max(1) as f64;
        let grads = mean_grads(results.into_iter().map(|r| r.1).collect());
        let lr = lr_at(f.lr, f.warmup, step);
        let grad_refs: Vec<&Tensor<F>> = grads.iter().collect();
        opt.step(
            &mut trainable_tensors_mut(model, sampler.as_deref_mut(), sel),
            &grad_refs,
            lr,
        )?;
        let m = StepMetrics {
            step,
            report,
            ntp_only_ce: ntp_only,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_event(TrainEvent::Step(&m));
        log.push(m);
        if !eval_prompts.is_empty() && cfg.eval.every > 0 && (step + 1) % cfg.eval.every == 0 {
            let rate = evaluate_rate(
                model,
                sampler.as_deref().filter(|_| setup.use_sampler),
                eval_prompts,
                &eval_opts,
            )?;
            let rec = EvalRecord {
                step: step + 1,
                strategy: cfg.eval.strategy,
                k_eval,
                mean_rate: rate,
                prompts: eval_prompts.len(),
            };
            on_event(TrainEvent::Eval(&rec));
            evals.push(rec);
        }
    }
    Ok((log, evals))
}

/// Model config with the vocabulary filled in from the corpus.
pub fn resolve_model_config(cfg: &TrainConfig, vocab: &Vocab) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    let want = vocab.base_size() + m.k_masks;
    if m.vocab_size == 0 {
        m.vocab_size = want;
    } else if m.vocab_size != want {
        return Err(TrainError::Config(format!(
            "model.vocab_size {} does not match corpus vocabulary {} + {} masks",
            m.vocab_size,
            vocab.base_size(),
            m.k_masks
        )));
    }
    m.validate()?;
    Ok(m)
}

/// Frozen probe sequences used for the NTP-only metric.
pub fn probe_examples(corpus: &Corpus) -> Vec<Example> {
    corpus.examples.iter().take(4).cloned().collect()
}

/// Generates the corpus, pretrains a base model unless one is given, then fine-tunes.
pub fn train<F: Scalar>(
    cfg: &TrainConfig,
    base: Option<ModelBundle<F>>,
    on_event: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let model_cfg = resolve_model_config(cfg, &corpus.vocab)?;
    let (mut model, pretrain_log) = match base {
        Some(m) => {
            if m.config.vocab_size != model_cfg.vocab_size || m.config.k_masks != model_cfg.k_masks {
                return Err(TrainError::ConfigMismatch(m.config.diff(&model_cfg)));
            }
            let rank = model_cfg.lora_rank;
            let m = if m.config.lora_rank == rank {
                m
            } else {
                m.with_lora_rank(rank, derive_seed(cfg.seed, "finetune.lora"))
            };
            (m, Vec::new())
        }
        None => {
            let mut m = ModelBundle::<F>::init(&model_cfg)?;
            let log = pretrain_base(&mut m, &corpus, cfg, on_event)?;
            (m, log)
        }
    };
    let mut sampler = cfg
        .finetune
        .sampler
        .then(|| SamplerHead::init(model.config.d_model, derive_seed(cfg.seed, "finetune.sampler")));
    let probe = probe_examples(&corpus);
    let prompts: Vec<Vec<u32>> = held_out_prompts(&cfg.corpus, cfg.eval.prompts)?
        .into_iter()
        .map(|p| p.tokens)
        .collect();
    let (metrics, evals) = finetune(
        &mut model,
        sampler.as_mut(),
        &corpus,
        &probe,
        if cfg.eval.every > 0 { &prompts } else { &[] },
        cfg,
        on_event,
    )?;
    Ok(TrainOutcome {
        model,
        sampler,
        vocab: corpus.vocab,
        pretrain_log,
        metrics,
        evals,
    })
}
