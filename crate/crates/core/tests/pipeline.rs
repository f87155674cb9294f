use r3_core::diagnostics::{routing_diff, DiffLevel};
use r3_core::engine::EngineProfile;
use r3_core::mask_store::{deserialize_trace, scope_fingerprint, serialize_trace, TraceStore};
use r3_core::model::{
    decode_checkpoint, encode_checkpoint, forward_logprobs, sample_rollout, ForwardOptions, InitOptions, ModelConfig,
    PolicyParams, RoutingTrace, SamplingConfig,
};
use r3_core::rl::{train_step, ReplaySource, TrainStepConfig};

fn params() -> PolicyParams {
    let cfg = ModelConfig {
        vocab: 10,
        d_model: 16,
        layers: 2,
        heads: 2,
        experts: 6,
        top_k: 2,
        max_seq_len: 24,
        expert_hidden: 12,
    };
    PolicyParams::init(
        cfg,
        InitOptions {
            seed: 5,
            router_scale: 2.0,
            ..Default::default()
        },
    )
    .unwrap()
}

fn sampling() -> SamplingConfig {
    SamplingConfig {
        temperature: 1.0,
        max_tokens: 6,
        stop: vec![9],
    }
}

#[test]
fn stored_and_serialized_masks_replay_bit_exactly() {
    let p = params();
    let infer = EngineProfile::canonical();
    let train = EngineProfile::default_training().with_jitter(0.3);
    let r = sample_rollout(&[1, 2, 3, 4], &p, &infer, &sampling(), 99).unwrap();

    let mut store = TraceStore::new(2, 6, 2, 16);
    let fp = scope_fingerprint(&infer, &p);
    store.put(fp, r.trace.tokens(), &r.trace).unwrap();
    let cached = store.get_longest_prefix(fp, &r.tokens());
    let decoded = deserialize_trace(&serialize_trace(&cached)).unwrap();
    let trace = RoutingTrace::new(r.tokens(), decoded).unwrap();

    let opts = ForwardOptions::replaying(&trace);
    let same = forward_logprobs(&r.tokens(), 4, &p, &infer, &opts).unwrap();
    assert_eq!(
        same.logprobs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        r.logprobs.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    let other = forward_logprobs(&r.tokens(), 4, &p, &train, &opts).unwrap();
    assert_eq!(routing_diff(&other.trace, &r.trace, DiffLevel::Router).unwrap().nonzero_fraction, 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_behaviour() {
    let p = params();
    let q = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.fingerprint(), q.fingerprint());
    let e = EngineProfile::default_training();
    assert_eq!(
        sample_rollout(&[3, 1], &p, &e, &sampling(), 4).unwrap(),
        sample_rollout(&[3, 1], &q, &e, &sampling(), 4).unwrap()
    );
}

#[test]
fn training_step_changes_parameters_and_logs_metrics() {
    let mut p = params();
    let infer = EngineProfile::canonical();
    let train = EngineProfile::default_training();
    let mut batch = Vec::new();
    for g in 0..2u64 {
        for m in 0..4u64 {
            let mut r = sample_rollout(&[1 + g as u32, 5], &p, &infer, &sampling(), g * 10 + m).unwrap();
            r.reward = (m % 2) as f64;
            r.group = g;
            batch.push(r);
        }
    }
    let cfg = TrainStepConfig {
        replay: ReplaySource::Rollout,
        group_size: 4,
        batch_size: 8,
        ..Default::default()
    };
    let before = p.clone();
    let out = train_step(&batch, &mut p, &cfg, &train, 1).unwrap();
    assert_ne!(before, p);
    assert_eq!(out.metrics.step, 1);
    assert!(out.metrics.kl_k3 >= 0.0 && out.metrics.grad_norm > 0.0);
    assert_eq!(out.records.len(), batch.iter().map(|r| r.response.len()).sum::<usize>());
    for (u, r) in out.update_traces.iter().zip(&batch) {
        assert_eq!(u, &r.trace);
    }
}
