//! Mask-token multi-token prediction for small decoder-only transformers.
//!
//! A frozen base model is extended with `k` mask tokens, gated LoRA adapters that
//! only act on mask rows, and a two-block sampler head. Decoding speculates `k`
//! future tokens per step and verifies them against the base model's own greedy
//! choices, so output is always identical to plain autoregressive decoding.

pub mod batching;
pub mod decoding;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod training;
