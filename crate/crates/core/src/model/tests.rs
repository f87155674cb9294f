use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::autodiff::{grad_check, Tape};
use crate::engine::EngineProfile;
use crate::error::Error;

fn tiny(seed: u64) -> PolicyParams {
    let cfg = ModelConfig {
        vocab: 7,
        d_model: 8,
        layers: 2,
        heads: 2,
        experts: 4,
        top_k: 2,
        max_seq_len: 12,
        expert_hidden: 5,
    };
    PolicyParams::init(
        cfg,
        InitOptions {
            seed,
            router_scale: 2.0,
            ..Default::default()
        },
    )
    .unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn taped_logprobs(p: &PolicyParams, tokens: &[u32], prompt: usize, e: &EngineProfile, o: &ForwardOptions<'_>) -> (Vec<f64>, RoutingTrace) {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, p);
    let out = forward_tape(&mut tape, p, &vars, tokens, prompt, e, o).unwrap();
    (tape.value(out.logprobs).data().to_vec(), out.trace)
}

#[test]
fn taped_forward_matches_cached_inference_bitwise() {
    let p = tiny(1);
    let tokens = [1u32, 4, 2, 6, 0, 3, 5];
    for e in [
        EngineProfile::canonical(),
        EngineProfile::default_training(),
        EngineProfile::default_training().with_jitter(1e-2),
    ] {
        for temperature in [1.0, 0.7] {
            let o = ForwardOptions {
                temperature,
                ..Default::default()
            };
            let inf = forward_logprobs(&tokens, 3, &p, &e, &o).unwrap();
            let (tl, tt) = taped_logprobs(&p, &tokens, 3, &e, &o);
            assert_eq!(inf.logprobs.len(), 4);
            assert_eq!(bits(&inf.logprobs), bits(&tl));
            assert_eq!(inf.trace, tt);
            assert_eq!(inf.topk_calls, tokens.len() * 2);
        }
    }
}

#[test]
fn replaying_own_trace_is_bit_identical_and_skips_selection() {
    let p = tiny(2);
    let e = EngineProfile::default_training();
    let tokens = [3u32, 1, 1, 5, 2, 6];
    let base = forward_logprobs(&tokens, 2, &p, &e, &ForwardOptions::default()).unwrap();
    let replay = forward_logprobs(&tokens, 2, &p, &e, &ForwardOptions::replaying(&base.trace)).unwrap();
    assert_eq!(bits(&base.logprobs), bits(&replay.logprobs));
    assert_eq!(replay.topk_calls, 0);
    assert_eq!(replay.trace, base.trace);
    let response_only = ForwardOptions {
        replay_prompt: false,
        ..ForwardOptions::replaying(&base.trace)
    };
    let r2 = forward_logprobs(&tokens, 2, &p, &e, &response_only).unwrap();
    assert_eq!(r2.topk_calls, 2 * 2);
    let (tl, _) = taped_logprobs(&p, &tokens, 2, &e, &ForwardOptions::replaying(&base.trace));
    assert_eq!(bits(&tl), bits(&base.logprobs));
}

#[test]
fn replay_trace_must_match_tokens() {
    let p = tiny(3);
    let e = EngineProfile::canonical();
    let base = forward_logprobs(&[1, 2, 3], 1, &p, &e, &ForwardOptions::default()).unwrap();
    let err = forward_logprobs(&[1, 5, 3], 1, &p, &e, &ForwardOptions::replaying(&base.trace));
    assert_eq!(err, Err(Error::TraceMismatch));
    // a prefix trace is accepted
    let pre = base.trace.prefix(2);
    let part = forward_logprobs(&[1, 2, 3, 4], 1, &p, &e, &ForwardOptions::replaying(&pre)).unwrap();
    assert_eq!(part.topk_calls, 2 * 2);
}

#[test]
fn length_limits_are_enforced() {
    let p = tiny(4);
    let e = EngineProfile::canonical();
    let long: Vec<u32> = vec![1; 13];
    assert!(matches!(
        forward_logprobs(&long, 1, &p, &e, &ForwardOptions::default()),
        Err(Error::SequenceTooLong { len: 13, max: 12 })
    ));
    assert!(forward_logprobs(&[1, 2], 0, &p, &e, &ForwardOptions::default()).is_err());
    assert!(sample_rollout(&[], &p, &e, &SamplingConfig::default(), 0).is_err());
    let r = sample_rollout(&[1, 2], &p, &e, &SamplingConfig { max_tokens: 100, ..Default::default() }, 0).unwrap();
    assert_eq!(r.prompt.len() + r.response.len(), 12);
    assert_eq!(r.trace.len(), 12);
}

#[test]
fn rollout_logprobs_agree_with_recompute_on_same_engine() {
    let p = tiny(5);
    let e = EngineProfile::default_training();
    let sampling = SamplingConfig {
        temperature: 0.8,
        max_tokens: 6,
        stop: vec![0],
    };
    for seed in 0..5 {
        let r = sample_rollout(&[2, 3], &p, &e, &sampling, seed).unwrap();
        assert_eq!(r, sample_rollout(&[2, 3], &p, &e, &sampling, seed).unwrap());
        let tokens = r.tokens();
        assert_eq!(r.trace.tokens(), &tokens[..]);
        let o = ForwardOptions {
            temperature: 0.8,
            ..Default::default()
        };
        let f = forward_logprobs(&tokens, 2, &p, &e, &o).unwrap();
        assert_eq!(bits(&f.logprobs), bits(&r.logprobs));
        assert_eq!(f.trace, r.trace);
        let raw = forward_logprobs(&tokens, 2, &p, &e, &ForwardOptions::default()).unwrap();
        assert_eq!(bits(&raw.logprobs), bits(&r.logprobs_raw));
        if let Some(pos) = r.response.iter().position(|&t| t == 0) {
            assert_eq!(pos, r.response.len() - 1);
        }
    }
}

#[test]
fn greedy_picks_the_mode() {
    let p = tiny(6);
    let e = EngineProfile::canonical();
    let g = SamplingConfig {
        temperature: 0.0,
        max_tokens: 3,
        stop: vec![],
    };
    let r = sample_rollout(&[4], &p, &e, &g, 0).unwrap();
    assert_eq!(r, sample_rollout(&[4], &p, &e, &g, 99).unwrap());
    let f = forward_logprobs(&r.tokens(), 1, &p, &e, &ForwardOptions::default()).unwrap();
    assert_eq!(bits(&f.logprobs), bits(&r.logprobs));
    let mut s = InferenceSession::new(&p, &e);
    let logits = s.step(4, None).unwrap();
    let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
    assert_eq!(r.response[0] as usize, best);
}

#[test]
fn cached_prefix_masks_are_replayed_during_generation() {
    let p = tiny(7);
    let e = EngineProfile::default_training();
    let s = SamplingConfig {
        temperature: 1.0,
        max_tokens: 3,
        stop: vec![],
    };
    let first = generate(&[1, 2, 3], &p, &e, &s, 4, None).unwrap();
    let cache = first.rollout.trace.prefix(3);
    let again = generate(&[1, 2, 3], &p, &e, &s, 4, Some(&cache)).unwrap();
    assert_eq!(again.rollout, first.rollout);
    assert_eq!(first.topk_calls - again.topk_calls, 3 * 2);
    assert!(generate(&[1, 5, 3], &p, &e, &s, 4, Some(&cache)).is_err());
}

#[test]
fn policy_gradient_checks_against_finite_differences() {
    let p = tiny(8);
    let e = EngineProfile::canonical();
    let tokens = [1u32, 3, 5, 2, 4];
    let base = forward_logprobs(&tokens, 2, &p, &e, &ForwardOptions::default()).unwrap();
    let trace = base.trace.clone();
    let o = ForwardOptions::replaying(&trace);
    let weights = [0.7, -1.3, 0.4];
    for name in ["lm_head", "blocks.0.router", "blocks.1.wq", "blocks.0.experts.1.w1", "embed"] {
        let slot = p.slot_of(name).unwrap();
        let err = grad_check(
            |t, v| {
                let mut vars = ParamVars::register(t, &p);
                vars.vars[slot] = v;
                let out = forward_tape(t, &p, &vars, &tokens, 2, &e, &o)?;
                let w = t.constant(crate::tensor::Tensor::vector(weights.to_vec()));
                let prod = t.mul(out.logprobs, w)?;
                t.sum(prod)
            },
            p.tensor(slot),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn replay_leaves_unrouted_experts_without_gradient() {
    let p = tiny(9);
    let e = EngineProfile::canonical();
    let tokens = [2u32, 2, 2, 2];
    let base = forward_logprobs(&tokens, 1, &p, &e, &ForwardOptions::default()).unwrap();
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &p);
    let out = forward_tape(&mut tape, &p, &vars, &tokens, 1, &e, &ForwardOptions::replaying(&base.trace)).unwrap();
    let total = tape.sum(out.logprobs).unwrap();
    let g = vars.collect(&tape.backward(total).unwrap(), &p);
    for (l, b) in p.layout().blocks.iter().enumerate() {
        let used: Vec<u16> = (0..tokens.len()).flat_map(|t| base.trace.mask(t, l).to_vec()).collect();
        for (ei, ex) in b.experts.iter().enumerate() {
            let nonzero = g[ex.w1].iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, used.contains(&(ei as u16)), "layer {l} expert {ei}");
        }
    }
}
