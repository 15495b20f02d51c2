//! Synthetic and file-backed character corpora.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::derive_rng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: usize = 3;

/// Character vocabulary: `0 PAD, 1 BOS, 2 EOS`, then the characters in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Ids below this value are real tokens; mask ids follow.
    pub fn base_size(&self) -> usize {
        SPECIALS + self.chars.len()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.chars.binary_search(&c).ok().map(|i| (i + SPECIALS) as u32)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, TrainError> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| TrainError::Corpus(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    /// Renders ids as text; specials and ids outside the table become `<...>` tags.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for &id in ids {
            match id {
                PAD => s.push_str("<pad>"),
                BOS => s.push_str("<bos>"),
                EOS => s.push_str("<eos>"),
                _ => match self.chars.get(id as usize - SPECIALS) {
                    Some(&c) => s.push(c),
                    None => s.push_str(&format!("<m{}>", id as usize - self.base_size() + 1)),
                },
            }
        }
        s
    }

    /// Comma-separated code points, for checkpoint headers.
    pub fn to_header(&self) -> String {
        self.chars
            .iter()
            .map(|&c| (c as u32).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_header(s: &str) -> Result<Self, TrainError> {
        if s.is_empty() {
            return Ok(Self { chars: Vec::new() });
        }
        let chars = s
            .split(',')
            .map(|p| {
                p.parse::<u32>()
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| TrainError::Corpus(format!("bad code point {p:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_chars(chars))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Motifs repeated to the sequence length.
    Pattern,
    /// `"ab+cd=efg"` sums followed by EOS; loss only on the answer.
    Arithmetic,
    /// Windows of a text file.
    File,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pattern" => Ok(Task::Pattern),
            "arithmetic" => Ok(Task::Arithmetic),
            "file" => Ok(Task::File),
            other => Err(format!("unknown task '{other}' (expected pattern, arithmetic or file)")),
        }
    }
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Pattern => "pattern",
            Task::Arithmetic => "arithmetic",
            Task::File => "file",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub task: Task,
    /// Number of training sequences.
    pub size: usize,
    pub seed: u64,
    /// Sequence length for pattern and file tasks.
    pub seq_len: usize,
    /// Pattern: letters available to motifs.
    pub alphabet: usize,
    /// Pattern: number of distinct motifs.
    pub motifs: usize,
    pub period_min: usize,
    pub period_max: usize,
    /// Arithmetic: digits per operand.
    pub digits: usize,
    /// File: source text.
    pub path: Option<PathBuf>,
    /// Tokens given as a decoding prompt; arithmetic prompts end at `=`.
    pub prompt_len: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            task: Task::Pattern,
            size: 256,
            seed: 0,
            seq_len: 24,
            alphabet: 8,
            motifs: 16,
            period_min: 2,
            period_max: 5,
            digits: 2,
            path: None,
            prompt_len: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    /// `loss_flags[i]` trains the prediction made at position `i`.
    pub loss_flags: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.size == 0 {
            return bad("corpus.size must be positive");
        }
        match self.task {
            Task::Pattern => {
                if self.alphabet == 0 || self.alphabet > 26 {
                    return bad("corpus.alphabet must be in 1..=26");
                }
                if self.period_min == 0 || self.period_min > self.period_max {
                    return bad("corpus.period_min must be in 1..=period_max");
                }
                if self.motifs == 0 {
                    return bad("corpus.motifs must be positive");
                }
                if self.seq_len < 2 {
                    return bad("corpus.seq_len must be at least 2");
                }
            }
            Task::Arithmetic => {
                if self.digits == 0 || self.digits > 9 {
                    return bad("corpus.digits must be in 1..=9");
                }
            }
            Task::File => {
                if self.path.is_none() {
                    return bad("corpus.path is required for the file task");
                }
                if self.seq_len < 2 {
                    return bad("corpus.seq_len must be at least 2");
                }
            }
        }
        if self.prompt_len == 0 && self.task != Task::Arithmetic {
            return bad("corpus.prompt_len must be positive");
        }
        Ok(())
    }
}

fn letters(n: usize) -> impl Iterator<Item = char> {
    (0..n as u8).map(|i| (b'a' + i) as char)
}

fn motif_pool(spec: &CorpusSpec) -> Vec<Vec<char>> {
    let mut rng = derive_rng(spec.seed, "corpus.motifs");
    let alphabet: Vec<char> = letters(spec.alphabet).collect();
    (0..spec.motifs)
        .map(|_| {
            let period = rng.random_range(spec.period_min..=spec.period_max);
            (0..period)
                .map(|_| *alphabet.choose(&mut rng).expect("nonempty alphabet"))
                .collect()
        })
        .collect()
}

fn arithmetic_text(digits: usize, a: u64, b: u64) -> String {
    format!("{a:0digits$}+{b:0digits$}={:0w$}", a + b, w = digits + 1)
}

fn read_file(spec: &CorpusSpec) -> Result<Vec<char>, TrainError> {
    let path = spec.path.as_ref().expect("validated");
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io(format!("reading {}: {e}", path.display())))?;
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < spec.seq_len {
        return Err(TrainError::Corpus(format!(
            "{} has {} characters, fewer than seq_len {}",
            path.display(),
            chars.len(),
            spec.seq_len
        )));
    }
    Ok(chars)
}

/// Vocabulary covering every character the task can emit.
pub fn derive_vocab(spec: &CorpusSpec) -> Result<Vocab, TrainError> {
    spec.validate()?;
    Ok(match spec.task {
        Task::Pattern => Vocab::from_chars(letters(spec.alphabet)),
        Task::Arithmetic => Vocab::from_chars("0123456789+=".chars()),
        Task::File => Vocab::from_chars(read_file(spec)?),
    })
}

/// Deterministic corpus for `spec`; `stream` separates training from held-out draws.
fn sample(spec: &CorpusSpec, stream: &str, count: usize) -> Result<Corpus, TrainError> {
    let vocab = derive_vocab(spec)?;
    let mut rng = derive_rng(spec.seed, stream);
    let mut examples = Vec::with_capacity(count);
    match spec.task {
        Task::Pattern => {
            let pool = motif_pool(spec);
            for _ in 0..count {
                let motif = pool.choose(&mut rng).expect("nonempty pool");
                let text: String = motif.iter().cycle().take(spec.seq_len).collect();
                let tokens = vocab.encode(&text)?;
                examples.push(Example {
                    loss_flags: vec![true; tokens.len()],
                    tokens,
                });
            }
        }
        Task::Arithmetic => {
            let hi = 10u64.pow(spec.digits as u32);
            for _ in 0..count {
                let (a, b) = (rng.random_range(0..hi), rng.random_range(0..hi));
                let mut tokens = vocab.encode(&arithmetic_text(spec.digits, a, b))?;
                tokens.push(EOS);
                let eq = 2 * spec.digits + 1;
                let loss_flags = (0..tokens.len()).map(|i| i >= eq && i + 1 < tokens.len()).collect();
                examples.push(Example { tokens, loss_flags });
            }
        }
        Task::File => {
            let chars = read_file(spec)?;
            let last_start = chars.len() - spec.seq_len;
            for _ in 0..count {
                let start = rng.random_range(0..=last_start);
                let text: String = chars[start..start + spec.seq_len].iter().collect();
                let tokens = vocab.encode(&text)?;
                examples.push(Example {
                    loss_flags: vec![true; tokens.len()],
                    tokens,
                });
            }
        }
    }
    Ok(Corpus { vocab, examples })
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus, TrainError> {
    sample(spec, "corpus.train", spec.size)
}

/// A decoding prompt and the tokens that should follow it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub expected: Vec<u32>,
}

/// Prompts cut from sequences drawn on a separate stream of the same task.
pub fn held_out_prompts(spec: &CorpusSpec, count: usize) -> Result<Vec<Prompt>, TrainError> {
    let corpus = sample(spec, "corpus.heldout", count)?;
    Ok(corpus
        .examples
        .into_iter()
        .map(|ex| {
            let cut = match spec.task {
                Task::Arithmetic => 2 * spec.digits + 2,
                _ => spec.prompt_len.min(ex.tokens.len() - 1),
            };
            Prompt {
                tokens: ex.tokens[..cut].to_vec(),
                expected: ex.tokens[cut..].to_vec(),
            }
        })
        .collect())
}
