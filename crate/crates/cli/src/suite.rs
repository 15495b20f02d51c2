use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use maskdec::numerics::derive_rng;
use maskdec::training::corpus::EOS;
use maskdec::training::held_out_prompts;
use rand::Rng;

use crate::commands::Run;

/// Where benchmark and verification prompts come from.
#[derive(Clone, Debug, PartialEq)]
pub enum Suite {
    /// Prompts cut from held-out sequences of the training task.
    HeldOut(usize),
    /// Uniformly random real tokens.
    Random(usize),
    /// One text prompt per nonempty line.
    File(PathBuf),
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |n: &str| -> Result<usize> {
            let n: usize = n.parse().with_context(|| format!("bad prompt count in suite '{s}'"))?;
            if n == 0 {
                bail!("suite '{s}' has no prompts");
            }
            Ok(n)
        };
        if let Some(n) = s.strip_prefix("heldout:") {
            Ok(Suite::HeldOut(count(n)?))
        } else if let Some(n) = s.strip_prefix("random:") {
            Ok(Suite::Random(count(n)?))
        } else {
            Ok(Suite::File(PathBuf::from(s)))
        }
    }
}

impl Suite {
    pub fn label(&self) -> String {
        match self {
            Suite::HeldOut(n) => format!("heldout:{n}"),
            Suite::Random(n) => format!("random:{n}"),
            Suite::File(p) => p.display().to_string(),
        }
    }

    pub fn prompts(&self, run: &Run, seed: u64) -> Result<Vec<Vec<u32>>> {
        match self {
            Suite::HeldOut(n) => Ok(held_out_prompts(&run.config.corpus, *n)?
                .into_iter()
                .map(|p| p.tokens)
                .collect()),
            Suite::Random(n) => {
                let len = run.config.corpus.prompt_len.max(1);
                let lo = EOS + 1;
                let hi = run.model.config.base_vocab() as u32;
                if lo >= hi {
                    bail!("vocabulary has no ordinary tokens to draw random prompts from");
                }
                let mut rng = derive_rng(seed, "cli.random_prompts");
                Ok((0..*n)
                    .map(|_| (0..len).map(|_| rng.random_range(lo..hi)).collect())
                    .collect())
            }
            Suite::File(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let prompts = text
                    .lines()
                    .filter(|l| !l.is_empty())
                    .map(|l| run.encode(l))
                    .collect::<Result<Vec<_>>>()?;
                if prompts.is_empty() {
                    bail!("{} contains no prompts", path.display());
                }
                Ok(prompts)
            }
        }
    }
}
