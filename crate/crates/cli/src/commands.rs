use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use maskdec::decoding::{
    acceptance_rate, future_rank_probe, greedy_autoregressive, speculative_decode, token_rank, DecodeOptions, Strategy,
};
use maskdec::model::{ForwardInput, ModelBundle};
use maskdec::numerics::{AllowedSet, Scalar};
use maskdec::sampler::SamplerHead;
use maskdec::training::checkpoint::{load_checkpoint, save_checkpoint};
use maskdec::training::corpus::EOS;
use maskdec::training::{
    generate_corpus, resolve_model_config, CorpusSpec, EvalRecord, Precision, StepMetrics, Task, TrainConfig,
    TrainEvent, Vocab,
};
use serde::Serialize;

use crate::suite::Suite;
use crate::VerifyFailed;

const META_VOCAB: &str = "vocab";
const META_CONFIG: &str = "train_config";
const META_STAGE: &str = "stage";

/// A checkpoint together with the tokenizer and config it was trained with.
pub struct Run {
    pub model: ModelBundle<f32>,
    pub sampler: Option<SamplerHead<f32>>,
    pub vocab: Vocab,
    pub config: TrainConfig,
    pub finetuned: bool,
}

impl Run {
    pub fn open(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path, None)?;
        let meta = |key: &str| {
            ck.meta
                .get(key)
                .ok_or_else(|| anyhow!("{} has no '{key}' metadata", path.display()))
        };
        let vocab = Vocab::from_header(meta(META_VOCAB)?)?;
        let config = TrainConfig::from_toml(meta(META_CONFIG)?)?;
        let finetuned = meta(META_STAGE)? == "finetuned";
        Ok(Self {
            model: ck.model,
            sampler: ck.sampler,
            vocab,
            config,
            finetuned,
        })
    }

    pub fn k_or_default(&self, k: Option<usize>) -> Result<usize> {
        let trained = self.model.config.k_masks;
        match k {
            None => Ok(trained),
            Some(k) if (1..=trained).contains(&k) => Ok(k),
            Some(k) => bail!("--k {k} must be in 1..={trained}"),
        }
    }

    /// Largest generation budget whose positions stay inside the model for every prompt.
    pub fn cap_new_tokens(&self, prompts: &[Vec<u32>], k: usize, max_new: usize) -> Result<usize> {
        let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
        let room = self.model.config.max_position.saturating_sub(longest + 2 * k);
        if room == 0 {
            bail!(
                "prompts of {longest} tokens leave no room for generation within max_position {}",
                self.model.config.max_position
            );
        }
        if room < max_new {
            eprintln!("note: generation capped at {room} new tokens by max_position");
        }
        Ok(max_new.min(room))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let ids = self.vocab.encode(text)?;
        if ids.is_empty() {
            bail!("prompt is empty");
        }
        Ok(ids)
    }
}

fn meta(vocab: &Vocab, cfg: &TrainConfig, stage: &str) -> Result<BTreeMap<String, String>> {
    Ok(BTreeMap::from([
        (META_VOCAB.to_string(), vocab.to_header()),
        (META_CONFIG.to_string(), cfg.to_toml()?),
        (META_STAGE.to_string(), stage.to_string()),
    ]))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Validated config with the vocabulary size filled in, plus that vocabulary.
fn resolve(path: Option<&Path>) -> Result<(TrainConfig, Vocab)> {
    let mut cfg = load_config(path)?;
    let vocab = maskdec::training::corpus::derive_vocab(&cfg.corpus)?;
    cfg.model = resolve_model_config(&cfg, &vocab)?;
    Ok((cfg, vocab))
}

#[derive(Serialize)]
struct Record<'a> {
    text: String,
    tokens: &'a [u32],
    loss_flags: &'a [bool],
}

pub fn gen_data(task: Task, size: usize, seed: u64, seq_len: usize, input: Option<PathBuf>, out: &Path) -> Result<()> {
    let spec = CorpusSpec {
        task,
        size,
        seed,
        seq_len,
        path: input,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    for ex in &corpus.examples {
        let rec = Record {
            text: corpus.vocab.decode(&ex.tokens),
            tokens: &ex.tokens,
            loss_flags: &ex.loss_flags,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!(
        "wrote {} {} sequences (vocabulary {}) to {}",
        corpus.examples.len(),
        task.name(),
        corpus.vocab.base_size(),
        out.display()
    );
    Ok(())
}

pub fn init(config: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, vocab) = resolve(config)?;
    let model = ModelBundle::<f32>::init(&cfg.model)?;
    let sampler = cfg.finetune.sampler.then(|| {
        SamplerHead::<f32>::init(
            cfg.model.d_model,
            maskdec::numerics::derive_seed(cfg.seed, "finetune.sampler"),
        )
    });
    save_checkpoint(&model, sampler.as_ref(), &meta(&vocab, &cfg, "untrained")?, out)?;
    println!("wrote untrained checkpoint to {}", out.display());
    Ok(())
}

/// Append-only CSV logs of one run.
struct Logs {
    pretrain: BufWriter<File>,
    metrics: BufWriter<File>,
    evals: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl Logs {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
            writeln!(w, "{header}")?;
            Ok(w)
        };
        Ok(Self {
            pretrain: open("pretrain.csv", StepMetrics::CSV_HEADER)?,
            metrics: open("metrics.csv", StepMetrics::CSV_HEADER)?,
            evals: open("eval.csv", EvalRecord::CSV_HEADER)?,
            error: None,
        })
    }

    fn record(&mut self, event: TrainEvent<'_>, cfg: &TrainConfig) {
        let res = match event {
            TrainEvent::Pretrain(m) => {
                if (m.step + 1) % 100 == 0 {
                    eprintln!(
                        "pretrain {}/{} ce {:.4}",
                        m.step + 1,
                        cfg.pretrain.steps,
                        m.report.base_ce
                    );
                }
                writeln!(self.pretrain, "{}", m.csv_line())
            }
            TrainEvent::Step(m) => {
                if (m.step + 1) % 100 == 0 {
                    eprintln!(
                        "finetune {}/{} total {:.4}",
                        m.step + 1,
                        cfg.finetune.steps,
                        m.report.total
                    );
                }
                writeln!(self.metrics, "{}", m.csv_line())
            }
            TrainEvent::Eval(e) => {
                eprintln!(
                    "eval step {} {} k={} rate {:.3}",
                    e.step,
                    e.strategy.name(),
                    e.k_eval,
                    e.mean_rate
                );
                writeln!(self.evals, "{}", e.csv_line())
            }
        };
        if let Err(e) = res {
            self.error.get_or_insert(e);
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e.into());
        }
        self.pretrain.flush()?;
        self.metrics.flush()?;
        self.evals.flush()?;
        Ok(())
    }
}

type Trained = (ModelBundle<f32>, Option<SamplerHead<f32>>);

fn fit<F: Scalar>(cfg: &TrainConfig, base: Option<ModelBundle<f32>>, logs: &mut Logs) -> Result<Trained> {
    let base = base.map(|m| m.cast::<F>());
    let out = maskdec::training::train::<F>(cfg, base, &mut |e| logs.record(e, cfg))?;
    Ok((out.model.cast(), out.sampler.map(|s| s.cast())))
}

pub fn train(config: Option<&Path>, base: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, vocab) = resolve(config)?;
    let base = base.map(|p| load_checkpoint(p, None)).transpose()?.map(|c| c.model);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let echoed = out.join("config.toml");
    fs::write(&echoed, cfg.to_toml()?).with_context(|| format!("writing {}", echoed.display()))?;
    let mut logs = Logs::create(out)?;
    let result = match cfg.precision {
        Precision::F32 => fit::<f32>(&cfg, base, &mut logs),
        Precision::F64 => fit::<f64>(&cfg, base, &mut logs),
    };
    logs.finish()?;
    let (model, sampler) = result?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, sampler.as_ref(), &meta(&vocab, &cfg, "finetuned")?, &ckpt)?;
    println!("run written to {}", out.display());
    Ok(())
}

pub fn decode(
    ckpt: &Path,
    prompt: &str,
    strategy: Strategy,
    k: Option<usize>,
    max_new: usize,
    no_sampler: bool,
) -> Result<()> {
    let run = Run::open(ckpt)?;
    let k = run.k_or_default(k)?;
    let ids = run.encode(prompt)?;
    let max_new = run.cap_new_tokens(std::slice::from_ref(&ids), k, max_new)?;
    let mut opts = DecodeOptions::new(k, strategy, max_new);
    opts.eos = Some(EOS);
    let sampler = run.sampler.as_ref().filter(|_| !no_sampler);
    let out = speculative_decode(&run.model, sampler, &ids, &opts)?;
    println!("prompt: {prompt}");
    println!("output: {}", run.vocab.decode(out.continuation()));
    let rate = if out.stats.steps == 0 {
        0.0
    } else {
        acceptance_rate(&out.stats)?
    };
    println!(
        "strategy={} k={k} sampler={} steps={} generated={} rate={rate:.4}",
        strategy.name(),
        if sampler.is_some() { "on" } else { "off" },
        out.stats.steps,
        out.stats.generated
    );
    Ok(())
}

pub fn probe(ckpt: &Path, prompt: &str, future: &str) -> Result<()> {
    let run = Run::open(ckpt)?;
    let ids = run.encode(prompt)?;
    let fut = run.vocab.encode(future)?;
    if fut.is_empty() {
        bail!("--future is empty");
    }
    let k = run.model.config.k_masks;
    let n = ids.len();
    let positions: Vec<usize> = (0..n).collect();
    let gate = vec![false; n];
    let plain = run.model.infer(&ForwardInput {
        tokens: &ids,
        positions: &positions,
        allowed: Arc::new(AllowedSet::causal(n)),
        gate: &gate,
    })?;
    let mut rows = vec![(
        "ntp".to_string(),
        fut[0],
        token_rank(plain.logits.row(n - 1), fut[0] as usize),
    )];
    let rest = &fut[1..fut.len().min(k + 1)];
    let ranks = future_rank_probe(&run.model, &ids, rest, k)?;
    for (j, (&t, r)) in rest.iter().zip(ranks).enumerate() {
        rows.push((format!("m{}", j + 1), t, r));
    }
    println!("prompt: {prompt}  (vocabulary {})", run.model.config.vocab_size);
    println!("{:<7} {:<6} {:<8} {:>5}", "offset", "slot", "token", "rank");
    for (i, (slot, t, r)) in rows.iter().enumerate() {
        let tok = format!("{:?}", run.vocab.decode(&[*t]));
        println!("{:<7} {:<6} {:<8} {:>5}", format!("+{}", i + 1), slot, tok, r);
    }
    Ok(())
}

fn first_divergence(a: &[u32], b: &[u32]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

pub fn verify(ckpt: &Path, suite: &str, k: Option<usize>, max_new: usize, seed: u64) -> Result<()> {
    let run = Run::open(ckpt)?;
    let k = run.k_or_default(k)?;
    let suite: Suite = suite.parse()?;
    let prompts = suite.prompts(&run, seed)?;
    let max_new = run.cap_new_tokens(&prompts, k, max_new)?;
    let samplers: Vec<Option<&SamplerHead<f32>>> = match &run.sampler {
        Some(s) => vec![Some(s), None],
        None => vec![None],
    };
    let mut failures = 0;
    let mut decodes = 0;
    for (p, prompt) in prompts.iter().enumerate() {
        let want = greedy_autoregressive(&run.model, prompt, max_new, Some(EOS))?;
        for strategy in [Strategy::Linear, Strategy::Quadratic] {
            for &sampler in &samplers {
                let mut opts = DecodeOptions::new(k, strategy, max_new);
                opts.eos = Some(EOS);
                let out = speculative_decode(&run.model, sampler, prompt, &opts)?;
                decodes += 1;
                if let Some(i) = first_divergence(out.continuation(), &want) {
                    failures += 1;
                    println!(
                        "prompt {p} strategy {} sampler {}: first divergent index {i}",
                        strategy.name(),
                        if sampler.is_some() { "on" } else { "off" }
                    );
                }
            }
        }
    }
    if failures > 0 {
        return Err(VerifyFailed(failures).into());
    }
    println!(
        "verified {} prompts x {decodes_per} configurations (k={k}): speculative output equals greedy output",
        prompts.len(),
        decodes_per = decodes / prompts.len().max(1)
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::first_divergence;

    #[test]
    fn divergence_index() {
        assert_eq!(first_divergence(&[1, 2, 3], &[1, 2, 3]), None);
        assert_eq!(first_divergence(&[1, 5, 3], &[1, 2, 3]), Some(1));
        assert_eq!(first_divergence(&[1, 2], &[1, 2, 3]), Some(2));
    }
}
