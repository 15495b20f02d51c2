mod common;

use common::{perturbed_model, random_tokens, sampler_for, toy_config};
use maskdec::decoding::{
    acceptance_rate, future_rank_probe, greedy_autoregressive, speculative_decode, speculative_decode_with, token_rank,
    verify_speculated, DecodeOptions, DraftRequest, Drafter, Result, SpecSource, Strategy,
};
use maskdec::model::ModelBundle;
use proptest::prelude::*;

fn opts(k: usize, strategy: Strategy, max_new: usize) -> DecodeOptions {
    DecodeOptions::new(k, strategy, max_new)
}

#[test]
fn greedy_zero_budget_and_determinism() {
    let cfg = toy_config(12, 3, 2, 1);
    let m = ModelBundle::<f64>::init(&cfg).unwrap();
    assert!(greedy_autoregressive(&m, &[3, 4], 0, None).unwrap().is_empty());
    let a = greedy_autoregressive(&m, &[3, 4], 10, None).unwrap();
    let b = greedy_autoregressive(&m, &[3, 4], 10, None).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert!(greedy_autoregressive(&m, &[], 3, None).is_err());
}

#[test]
fn speculative_matches_greedy_on_untrained_models() {
    for seed in 0..6u64 {
        let cfg = toy_config(12, 3, 2, seed);
        let m = perturbed_model::<f64>(&cfg);
        let head = sampler_for::<f64>(&cfg);
        let prompt = random_tokens(seed, "prompt", 5, 12);
        let reference = greedy_autoregressive(&m, &prompt, 20, None).unwrap();
        for strategy in [Strategy::Linear, Strategy::Quadratic] {
            for k in 1..=3 {
                for sampler in [None, Some(&head)] {
                    let out = speculative_decode(&m, sampler, &prompt, &opts(k, strategy, 20)).unwrap();
                    assert_eq!(out.continuation(), &reference[..], "{strategy:?} k={k}");
                    let rate = acceptance_rate(&out.stats).unwrap();
                    assert!((1.0..=(k + 1) as f64).contains(&rate));
                    assert_eq!(out.stats.generated, out.tokens.len() - prompt.len());
                    assert!(out.trace.iter().all(|t| (1..=k + 1).contains(&t.emitted)));
                }
            }
        }
    }
}

#[test]
fn eos_truncates_like_greedy() {
    let cfg = toy_config(12, 3, 2, 9);
    let m = perturbed_model::<f64>(&cfg);
    let prompt = [1, 2, 3];
    let free = greedy_autoregressive(&m, &prompt, 15, None).unwrap();
    let eos = free[4];
    let reference = greedy_autoregressive(&m, &prompt, 15, Some(eos)).unwrap();
    assert_eq!(*reference.last().unwrap(), eos);
    for strategy in [Strategy::Linear, Strategy::Quadratic] {
        let mut o = opts(3, strategy, 15);
        o.eos = Some(eos);
        let out = speculative_decode(&m, None, &prompt, &o).unwrap();
        assert_eq!(out.continuation(), &reference[..]);
    }
}

/// Drafts tokens that the base model is known not to pick next.
struct AlwaysReject<'m> {
    model: &'m ModelBundle<f64>,
    k: usize,
}

impl Drafter<f64> for AlwaysReject<'_> {
    fn draft(&mut self, req: &DraftRequest<'_, f64>) -> Result<(Vec<u32>, SpecSource)> {
        let next = greedy_autoregressive(self.model, req.verified, 1, None)?[0];
        let wrong = (next + 1) % 12;
        Ok((vec![wrong; self.k], SpecSource::External))
    }
}

#[test]
fn always_reject_gives_rate_one() {
    let cfg = toy_config(12, 3, 2, 4);
    let m = perturbed_model::<f64>(&cfg);
    for strategy in [Strategy::Linear, Strategy::Quadratic] {
        for k in 1..=3 {
            let mut d = AlwaysReject { model: &m, k };
            let out = speculative_decode_with(&m, &[5, 6], &opts(k, strategy, 12), &mut d).unwrap();
            assert_eq!(acceptance_rate(&out.stats).unwrap(), 1.0);
            assert_eq!(out.stats.histogram[0], out.stats.steps);
        }
    }
}

#[test]
fn stats_match_trace_recount() {
    let cfg = toy_config(12, 3, 2, 2);
    let m = perturbed_model::<f64>(&cfg);
    let head = sampler_for::<f64>(&cfg);
    let mut o = opts(3, Strategy::Quadratic, 40);
    o.max_steps = 5;
    let out = speculative_decode(&m, Some(&head), &[7, 8, 9], &o).unwrap();
    assert_eq!(out.trace.len(), 5);
    let g: usize = out.trace.iter().map(|t| t.emitted).sum();
    assert_eq!(out.stats.generated, g);
    assert_eq!(out.stats.steps, 5);
    assert_eq!(acceptance_rate(&out.stats).unwrap(), g as f64 / 5.0);
    for (a, &count) in out.stats.histogram.iter().enumerate() {
        assert_eq!(count, out.trace.iter().filter(|t| t.accepted == a).count());
    }
}

#[test]
fn invalid_k_rejected() {
    let cfg = toy_config(12, 3, 2, 2);
    let m = ModelBundle::<f64>::init(&cfg).unwrap();
    assert!(speculative_decode(&m, None, &[1], &opts(0, Strategy::Linear, 3)).is_err());
    assert!(speculative_decode(&m, None, &[1], &opts(4, Strategy::Linear, 3)).is_err());
}

#[test]
fn rank_probe_top_token_is_rank_one() {
    let cfg = toy_config(12, 3, 2, 5);
    let m = perturbed_model::<f64>(&cfg);
    let prompt = [2, 3, 4];
    let ranks = future_rank_probe(&m, &prompt, &[0, 1, 2], 3).unwrap();
    assert_eq!(ranks.len(), 3);
    assert!(ranks.iter().all(|&r| (1..=cfg.vocab_size).contains(&r)));
    assert!(future_rank_probe(&m, &prompt, &[0, 1, 2, 3], 3).is_err());
    // The argmax at m_1 must rank first.
    let masks: Vec<u32> = (0..3).map(|j| cfg.mask_id(j)).collect();
    let layout = maskdec::batching::build_linear_inference_input(&prompt, &[], &masks).unwrap();
    let out = m.infer(&layout.batch.forward_input()).unwrap();
    let top = maskdec::numerics::argmax(out.logits.row(3)) as u32;
    assert_eq!(future_rank_probe(&m, &prompt, &[top], 3).unwrap(), vec![1]);
    assert_eq!(token_rank(out.logits.row(3), top as usize), 1);
}

/// Enumerates verification by brute force over every first-mismatch position.
fn verify_oracle(c: &[u32], s: &[u32]) -> (usize, Vec<u32>) {
    for a in 0..=s.len() {
        if a == s.len() || s[a] != c[a] {
            let mut e = s[..a].to_vec();
            e.push(c[a]);
            return (a, e);
        }
    }
    unreachable!()
}

proptest! {
    #[test]
    fn verify_matches_enumeration(s in prop::collection::vec(0u32..3, 0..6), tail in prop::collection::vec(0u32..3, 7)) {
        let c: Vec<u32> = tail[..s.len() + 1].to_vec();
        prop_assert_eq!(verify_speculated(&c, &s).unwrap(), verify_oracle(&c, &s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn speculation_reproduces_greedy_in_every_mode(
        seed in 0u64..1_000,
        plen in 1usize..10,
        k in 1usize..5,
        quadratic in any::<bool>(),
        cover in any::<bool>(),
        with_sampler in any::<bool>(),
        eos in prop::option::of(0u32..12u32),
    ) {
        let cfg = toy_config(12, k, 2, seed);
        let model = perturbed_model::<f32>(&cfg);
        let sampler = sampler_for::<f32>(&cfg);
        let prompt = random_tokens(seed, "test.prompt", plen, 12);
        let strategy = if quadratic { Strategy::Quadratic } else { Strategy::Linear };
        let mut opts = DecodeOptions::new(k, strategy, 24);
        opts.eos = eos;
        opts.cover_reject_first = cover;

        let out = speculative_decode(&model, with_sampler.then_some(&sampler), &prompt, &opts).unwrap();
        let greedy = greedy_autoregressive(&model, &prompt, 24, eos).unwrap();
        prop_assert_eq!(out.continuation(), &greedy[..]);

        let s = &out.stats;
        prop_assert_eq!(s.histogram.iter().sum::<usize>(), s.steps);
        prop_assert_eq!(out.trace.iter().map(|t| t.emitted).sum::<usize>(), s.generated);
        let rate = s.rate().unwrap();
        prop_assert!((1.0..=(k + 1) as f64).contains(&rate), "rate {rate}");

        let last = out.trace.len() - 1;
        for (i, t) in out.trace.iter().enumerate() {
            prop_assert!(t.accepted <= t.speculated);
            if i < last && quadratic && cover {
                prop_assert_ne!(t.next, SpecSource::None, "step {} left no speculation", i);
            }
            if quadratic && !cover && t.speculated > 0 && t.accepted == 0 {
                prop_assert_eq!(t.next, SpecSource::None);
            }
        }
    }
}
