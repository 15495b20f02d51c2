#![allow(dead_code)]

use maskdec::model::{ModelBundle, ModelConfig};
use maskdec::numerics::{derive_rng, Scalar};
use maskdec::sampler::SamplerHead;
use rand::Rng;

pub fn toy_config(vocab_base: usize, k: usize, rank: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab_base + k,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        k_masks: k,
        lora_rank: rank,
        max_position: 96,
        seed,
        ..ModelConfig::default()
    }
}

/// Model with nonzero adapters so gate mistakes would show up.
pub fn perturbed_model<F: Scalar>(cfg: &ModelConfig) -> ModelBundle<F> {
    let mut m = ModelBundle::<F>::init(cfg).unwrap();
    let mut rng = derive_rng(cfg.seed, "test.lora_b");
    m.weights.visit_mut(|name, _, t| {
        if name.ends_with("lora_b") {
            for v in t.data_mut() {
                *v = F::from_f64_lossy(rng.random_range(-0.5..0.5));
            }
        }
    });
    m
}

pub fn sampler_for<F: Scalar>(cfg: &ModelConfig) -> SamplerHead<F> {
    SamplerHead::init(cfg.d_model, cfg.seed ^ 0x5a)
}

pub fn random_tokens(seed: u64, name: &str, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = derive_rng(seed, name);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

// Loop-based reference implementations, written without the tape.

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &maskdec::numerics::Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `y = W x` with `W` stored `[out × in]`.
fn mat_vec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn lora(
    layer: &maskdec::model::LoraLinear<maskdec::numerics::Tensor<f64>>,
    x: &[f64],
    gate: bool,
    scale: f64,
) -> Vec<f64> {
    let mut y = mat_vec(&to_mat(&layer.weight), x);
    if let (true, Some(ad)) = (gate, &layer.adapter) {
        let a = to_mat(&ad.a);
        let b = to_mat(&ad.b);
        let r = b.len();
        let down: Vec<f64> = (0..r).map(|c| (0..x.len()).map(|i| x[i] * a[i][c]).sum()).collect();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += scale * (0..r).map(|c| down[c] * b[c][o]).sum::<f64>();
        }
    }
    y
}

/// Reference forward returning `(hidden, logits)` per row. `visible[i][j]` says
/// whether row `i` may attend to row `j`.
pub fn reference_forward(
    m: &ModelBundle<f64>,
    tokens: &[u32],
    positions: &[usize],
    visible: &[Vec<bool>],
    gate: &[bool],
) -> (Mat, Mat) {
    let c = &m.config;
    let w = &m.weights;
    let d = c.d_model;
    let t = tokens.len();
    let mut x: Mat = tokens
        .iter()
        .zip(positions)
        .map(|(&tok, &p)| {
            let tok = tok as usize;
            let e = if tok < c.base_vocab() {
                w.token_embed.row(tok).to_vec()
            } else {
                w.mask_embed.row(tok - c.base_vocab()).to_vec()
            };
            (0..d)
                .map(|j| {
                    let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                    let pe = if j % 2 == 0 {
                        (p as f64 * freq).sin()
                    } else {
                        (p as f64 * freq).cos()
                    };
                    e[j] + pe
                })
                .collect()
        })
        .collect();
    let heads = c.n_heads;
    let dh = d / heads;
    let s = c.lora_scale;
    for blk in &w.blocks {
        let a: Mat = x
            .iter()
            .map(|r| layer_norm(r, blk.attn_norm.gain.data(), blk.attn_norm.bias.data()))
            .collect();
        let q: Mat = (0..t).map(|i| lora(&blk.wq, &a[i], gate[i], s)).collect();
        let k: Mat = (0..t).map(|i| lora(&blk.wk, &a[i], gate[i], s)).collect();
        let v: Mat = (0..t).map(|i| lora(&blk.wv, &a[i], gate[i], s)).collect();
        let mut att = vec![vec![0.0; d]; t];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        if visible[i][j] {
                            cols.clone().map(|cc| q[i][cc] * k[j][cc]).sum::<f64>() / (dh as f64).sqrt()
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for cc in cols.clone() {
                    att[i][cc] = (0..t).map(|j| ex[j] / z * v[j][cc]).sum();
                }
            }
        }
        for i in 0..t {
            let o = lora(&blk.wo, &att[i], gate[i], s);
            for j in 0..d {
                x[i][j] += o[j];
            }
            let f = layer_norm(&x[i], blk.ffn_norm.gain.data(), blk.ffn_norm.bias.data());
            let up: Vec<f64> = lora(&blk.w_up, &f, gate[i], s).into_iter().map(silu).collect();
            let down = lora(&blk.w_down, &up, gate[i], s);
            for j in 0..d {
                x[i][j] += down[j];
            }
        }
    }
    let hidden: Mat = x
        .iter()
        .map(|r| layer_norm(r, w.final_norm.gain.data(), w.final_norm.bias.data()))
        .collect();
    let u = to_mat(&w.unembed);
    let logits = hidden.iter().map(|h| mat_vec(&u, h)).collect();
    (hidden, logits)
}

/// Reference sampler logits for one hidden vector.
pub fn reference_sampler(head: &SamplerHead<f64>, m: &ModelBundle<f64>, prev: u32, z: &[f64]) -> Vec<f64> {
    let c = &m.config;
    let p = prev as usize;
    let mut x = if p < c.base_vocab() {
        m.weights.token_embed.row(p).to_vec()
    } else {
        m.weights.mask_embed.row(p - c.base_vocab()).to_vec()
    };
    x.extend_from_slice(z);
    let w = &head.weights;
    let h: Vec<f64> = mat_vec(&to_mat(&w.w1), &x).into_iter().map(silu).collect();
    let h = layer_norm(&h, w.norm1.gain.data(), w.norm1.bias.data());
    let h: Vec<f64> = mat_vec(&to_mat(&w.w2), &h).into_iter().map(silu).collect();
    let h = layer_norm(&h, w.norm2.gain.data(), w.norm2.bias.data());
    mat_vec(&to_mat(&m.weights.unembed), &h)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
