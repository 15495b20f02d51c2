//! Acceptance-rate sweep over strategies, k_eval and sampler on/off.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use maskdec::decoding::{acceptance_rate, decode_suite, DecodeOptions, Strategy};
use maskdec::training::corpus::EOS;

use crate::commands::Run;
use crate::suite::Suite;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub task: String,
    pub strategy: Strategy,
    pub k_eval: usize,
    pub sampler: bool,
    pub lcm_trained: bool,
    pub lora_rank: usize,
    pub rate_mean: f64,
    pub rate_std: f64,
    pub prompts: usize,
    pub ms_per_token: f64,
}

pub const CSV_HEADER: &str =
    "task,strategy,k_eval,sampler,lcm_trained,lora_rank,rate_mean,rate_std,prompts,ms_per_token";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{},{:.4}",
            self.task,
            self.strategy.name(),
            self.k_eval,
            on_off(self.sampler),
            on_off(self.lcm_trained),
            self.lora_rank,
            self.rate_mean,
            self.rate_std,
            self.prompts,
            self.ms_per_token
        )
    }

    fn sort_key(&self) -> (String, usize, Strategy, bool) {
        (self.task.clone(), self.k_eval, self.strategy, !self.sampler)
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Parses `a-b`, `a..b` or a single `k` (inclusive).
pub fn parse_k_range(s: &str, k_train: usize) -> Result<Vec<usize>> {
    let parse = |p: &str| -> Result<usize> { p.trim().parse().with_context(|| format!("bad --k-range '{s}'")) };
    let (lo, hi) = if let Some((a, b)) = s.split_once("..") {
        (parse(a)?, parse(b)?)
    } else if let Some((a, b)) = s.split_once('-') {
        (parse(a)?, parse(b)?)
    } else {
        let k = parse(s)?;
        (k, k)
    };
    if lo == 0 || lo > hi || hi > k_train {
        bail!("--k-range '{s}' must lie within 1..={k_train}");
    }
    Ok((lo..=hi).collect())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let header = [
        "task", "strategy", "k_eval", "sampler", "lcm", "rank", "rate", "prompts", "ms/token",
    ];
    let cells: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                r.strategy.name().to_string(),
                r.k_eval.to_string(),
                on_off(r.sampler).to_string(),
                on_off(r.lcm_trained).to_string(),
                r.lora_rank.to_string(),
                format!("{:.3} ± {:.3}", r.rate_mean, r.rate_std),
                r.prompts.to_string(),
                format!("{:.3}", r.ms_per_token),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |vals: Vec<&str>| {
        vals.iter()
            .zip(&widths)
            .map(|(v, &w)| format!("{v:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in &cells {
        out.push_str(&line(row.iter().map(|s| s.as_str()).collect()));
        out.push('\n');
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    ckpt: &Path,
    suite: &str,
    strategies: &[Strategy],
    k_range: Option<&str>,
    ablate: bool,
    max_new: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let run = Run::open(ckpt)?;
    let k_train = run.model.config.k_masks;
    let ks = match k_range {
        Some(s) => parse_k_range(s, k_train)?,
        None => (1..=k_train).collect(),
    };
    if strategies.is_empty() {
        bail!("--strategies is empty");
    }
    let suite: Suite = suite.parse()?;
    let prompts = suite.prompts(&run, seed)?;
    let max_new = run.cap_new_tokens(&prompts, ks.iter().copied().max().unwrap_or(1), max_new)?;
    let mut sampler_modes = Vec::new();
    if run.sampler.is_some() {
        sampler_modes.push(true);
    }
    if ablate || run.sampler.is_none() {
        sampler_modes.push(false);
    }
    let lcm_trained = run.finetuned && run.config.finetune.weights.lcm > 0.0;
    let mut rows = Vec::new();
    for &k in &ks {
        for &strategy in strategies {
            for &with_sampler in &sampler_modes {
                let mut opts = DecodeOptions::new(k, strategy, max_new);
                opts.eos = Some(EOS);
                let sampler = run.sampler.as_ref().filter(|_| with_sampler);
                let start = Instant::now();
                let outs = decode_suite(&run.model, sampler, &prompts, &opts)?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                let rates = outs
                    .iter()
                    .map(|o| acceptance_rate(&o.stats))
                    .collect::<Result<Vec<f64>, _>>()?;
                if let Some(bad) = rates.iter().find(|&&r| !(1.0..=(k + 1) as f64).contains(&r)) {
                    bail!("rate {bad} outside [1, {}] for {} k={k}", k + 1, strategy.name());
                }
                let generated: usize = outs.iter().map(|o| o.stats.generated).sum();
                let (rate_mean, rate_std) = mean_std(&rates);
                rows.push(BenchRow {
                    task: run.config.corpus.task.name().to_string(),
                    strategy,
                    k_eval: k,
                    sampler: with_sampler,
                    lcm_trained,
                    lora_rank: run.model.config.lora_rank,
                    rate_mean,
                    rate_std,
                    prompts: prompts.len(),
                    ms_per_token: elapsed / generated.max(1) as f64,
                });
            }
        }
    }
    rows.sort_by_key(|r| r.sort_key());
    println!(
        "suite {} ({} prompts, up to {max_new} new tokens)",
        suite.label(),
        prompts.len()
    );
    print!("{}", render_table(&rows));
    if let Some(path) = out {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&r.csv_line());
            text.push('\n');
        }
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_ranges() {
        assert_eq!(parse_k_range("1-4", 4).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_k_range("2..3", 4).unwrap(), vec![2, 3]);
        assert_eq!(parse_k_range("3", 4).unwrap(), vec![3]);
        assert!(parse_k_range("0-2", 4).is_err());
        assert!(parse_k_range("1-5", 4).is_err());
        assert!(parse_k_range("x", 4).is_err());
    }

    #[test]
    fn table_aligns_columns() {
        let row = BenchRow {
            task: "pattern".into(),
            strategy: Strategy::Linear,
            k_eval: 1,
            sampler: true,
            lcm_trained: false,
            lora_rank: 8,
            rate_mean: 1.5,
            rate_std: 0.25,
            prompts: 3,
            ms_per_token: 0.5,
        };
        let t = render_table(std::slice::from_ref(&row));
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].find("strategy"), lines[1].find("linear"));
        assert_eq!(row.csv_line().split(',').count(), CSV_HEADER.split(',').count());
    }
}
