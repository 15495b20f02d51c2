//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! - magic `MSKDCKPT`, `u32` format version
//! - `u32` header length, header as UTF-8 `key=value` lines (model config and metadata)
//! - `u32` record count, then per record: `u32` name length, name, `u8` dtype tag,
//!   `u8` rank, `rank × u64` dims, `f32` payload
//! - `u64` FNV-1a checksum of every byte between the version and the checksum

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::{ModelBundle, ModelConfig, ModelWeights, SamplerWeights};
use crate::numerics::{Scalar, Tensor};
use crate::sampler::SamplerHead;

use super::TrainError;

pub const MAGIC: &[u8; 8] = b"MSKDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelBundle<f32>,
    pub sampler: Option<SamplerHead<f32>>,
    /// Free-form metadata (tokenizer, training provenance).
    pub meta: BTreeMap<String, String>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_record<F: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

/// Serializes a model (rounded to `f32`), optional sampler and metadata.
pub fn encode_checkpoint<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    meta: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut header = String::new();
    for (k, v) in model.config.to_kv() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("has_sampler={}\n", sampler.is_some()));
    for (k, v) in meta {
        header.push_str(&format!("{META_PREFIX}{k}={}\n", escape(v)));
    }
    let mut records = Vec::new();
    let mut count = 0u32;
    model.weights.visit(|name, _, t| {
        write_record(&mut records, name, t);
        count += 1;
    });
    if let Some(s) = sampler {
        s.weights.visit(|name, _, t| {
            write_record(&mut records, name, t);
            count += 1;
        });
    }
    let mut body = Vec::new();
    put_u32(&mut body, header.len() as u32);
    body.extend_from_slice(header.as_bytes());
    put_u32(&mut body, count);
    body.extend_from_slice(&records);

    let mut out = Vec::with_capacity(body.len() + 20);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&body);
    out.extend_from_slice(&fnv1a64(&body).to_le_bytes());
    out
}

pub fn save_checkpoint<F: Scalar>(
    model: &ModelBundle<F>,
    sampler: Option<&SamplerHead<F>>,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<(), TrainError> {
    let bytes = encode_checkpoint(model, sampler, meta);
    std::fs::write(path, bytes).map_err(|e| TrainError::Io(format!("writing {}: {e}", path.display())))
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(v: &str) -> String {
    let mut out = String::new();
    let mut chars = v.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(o) => out.push(o),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes. With `expected`, a differing model config is an error
/// listing every differing field.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(TrainError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(TrainError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body = &bytes[12..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(TrainError::Checksum { stored, actual });
    }
    let mut r = Reader { buf: body, pos: 0 };
    let hlen = r.u32()? as usize;
    let header =
        std::str::from_utf8(r.take(hlen)?).map_err(|_| TrainError::Checkpoint("header is not UTF-8".into()))?;
    let mut kv = Vec::new();
    let mut meta = BTreeMap::new();
    let mut has_sampler = false;
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Checkpoint(format!("bad header line {line:?}")))?;
        if let Some(mk) = k.strip_prefix(META_PREFIX) {
            meta.insert(mk.to_string(), unescape(v));
        } else if k == "has_sampler" {
            has_sampler = v == "true";
        } else {
            kv.push((k.to_string(), v.to_string()));
        }
    }
    let config = ModelConfig::from_kv(&kv).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if let Some(exp) = expected {
        let diff = exp.diff(&config);
        if !diff.is_empty() {
            return Err(TrainError::ConfigMismatch(diff));
        }
    }
    let count = r.u32()? as usize;
    let mut records: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| TrainError::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(TrainError::Checkpoint(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        records.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes after records".into()));
    }

    // Rebuild the containers from a template so names and shapes are checked.
    let template = ModelBundle::<f32>::init(&config).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut take = |name: &str, like: &Tensor<f32>| -> Result<Tensor<f32>, TrainError> {
        let t = records
            .remove(name)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing record {name}")))?;
        if t.shape() != like.shape() {
            return Err(TrainError::Checkpoint(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    };
    let weights: ModelWeights<Tensor<f32>> = template.weights.try_map(|n, _, t| take(n, t))?;
    let sampler = if has_sampler {
        let st = SamplerHead::<f32>::init(config.d_model, 0);
        let w: SamplerWeights<Tensor<f32>> = st.weights.try_map(|n, _, t| take(n, t))?;
        Some(SamplerHead { weights: w })
    } else {
        None
    };
    if let Some(extra) = records.keys().next() {
        return Err(TrainError::Checkpoint(format!("unexpected record {extra}")));
    }
    Ok(Checkpoint {
        model: ModelBundle { config, weights },
        sampler,
        meta,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("reading {}: {e}", path.display())))?;
    decode_checkpoint(&bytes, expected)
}
