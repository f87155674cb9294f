use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::engine::EngineProfile;
use crate::model::{forward_logprobs, sample_rollout, ForwardOptions, InitOptions, ModelConfig, PolicyParams, SamplingConfig};

#[test]
fn advantage_examples() {
    assert_eq!(group_advantages(&[0.5; 4]).unwrap(), vec![0.0; 4]);
    let a = group_advantages(&[1.0, 0.0]).unwrap();
    let oracle = 0.5 / (0.5 + 1e-6);
    assert!((a[0] - oracle).abs() < 1e-15 && (a[1] + oracle).abs() < 1e-15);
    assert!(group_advantages(&[1.0]).is_err());
}

proptest! {
    #[test]
    fn advantages_sum_to_zero(r in proptest::collection::vec(0.0f64..1.0, 2..16)) {
        let a = group_advantages(&r).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tis_multiplier_in_range(old in -20.0f64..0.0, infer in -20.0f64..0.0) {
        let m = TisConfig::default().multiplier(old, infer).unwrap();
        prop_assert!(m > 0.0 && m <= 2.0);
    }

    #[test]
    fn clipped_branch_has_zero_gradient(w in 0.01f64..3.0, a in -2.0f64..2.0) {
        let c = ClipConfig::GRPO;
        let lw = libm::log(w);
        let l = grpo_loss(&[TokenTerms { logp_new: &[lw], logp_old: &[0.0], advantage: a, logp_infer: None }], &c, None).unwrap();
        if (a > 0.0 && w > 1.0 + c.eps_high) || (a < 0.0 && w < 1.0 - c.eps_low) {
            prop_assert_eq!(l.grad[0][0], 0.0);
        } else {
            prop_assert!((l.grad[0][0] - w * a).abs() < 1e-12);
        }
    }
}

#[test]
fn ratio_one_reduces_to_policy_gradient() {
    let lp1 = [-0.5, -1.25, -2.0];
    let lp2 = [-0.1, -3.0];
    let seqs = [
        TokenTerms {
            logp_new: &lp1,
            logp_old: &lp1,
            advantage: 0.8,
            logp_infer: None,
        },
        TokenTerms {
            logp_new: &lp2,
            logp_old: &lp2,
            advantage: -0.3,
            logp_infer: None,
        },
    ];
    let l = grpo_loss(&seqs, &ClipConfig::GRPO, None).unwrap();
    assert!((l.objective - (0.8 - 0.3) / 2.0).abs() < 1e-12);
    // gradient of (1/S) sum_s (1/n_s) sum_t A_s logp_t
    for t in 0..3 {
        assert!((l.grad[0][t] - 0.8 / 2.0 / 3.0).abs() < 1e-15);
    }
    for t in 0..2 {
        assert!((l.grad[1][t] + 0.3 / 2.0 / 2.0).abs() < 1e-15);
    }
    // finite differences of the objective itself
    let h = 1e-6;
    for (s, t) in [(0usize, 1usize), (1, 0)] {
        let mut plus = [lp1.to_vec(), lp2.to_vec()];
        let mut minus = plus.clone();
        plus[s][t] += h;
        minus[s][t] -= h;
        let f = |v: &[Vec<f64>; 2]| {
            let terms = [
                TokenTerms {
                    logp_new: &v[0],
                    logp_old: &lp1,
                    advantage: 0.8,
                    logp_infer: None,
                },
                TokenTerms {
                    logp_new: &v[1],
                    logp_old: &lp2,
                    advantage: -0.3,
                    logp_infer: None,
                },
            ];
            grpo_loss(&terms, &ClipConfig::GRPO, None).unwrap().objective
        };
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        assert!(((fd - l.grad[s][t]) / l.grad[s][t]).abs() < 1e-6);
    }
}

#[test]
fn clip_boundaries() {
    let c = ClipConfig::GRPO;
    let up = libm::log(1.5);
    let l = grpo_loss(&[TokenTerms { logp_new: &[up], logp_old: &[0.0], advantage: 1.0, logp_infer: None }], &c, None).unwrap();
    assert!((l.objective - 1.27).abs() < 1e-12);
    assert_eq!(l.grad[0][0], 0.0);
    assert_eq!(l.clip_fraction, 1.0);
    let down = libm::log(0.5);
    let l = grpo_loss(&[TokenTerms { logp_new: &[down], logp_old: &[0.0], advantage: -1.0, logp_infer: None }], &c, None).unwrap();
    assert!((l.objective + 0.8).abs() < 1e-12);
    assert_eq!(l.grad[0][0], 0.0);
    let deg = grpo_loss(&[TokenTerms { logp_new: &[0.0], logp_old: &[-800.0], advantage: 1.0, logp_infer: None }], &c, None);
    assert_eq!(deg, Err(crate::Error::DegenerateRatio));
}

#[test]
fn tis_ceiling() {
    let tis = TisConfig { c: 2.0, enabled: true };
    assert_eq!(tis.multiplier(libm::log(5.0), 0.0).unwrap(), 2.0);
    let seq = TokenTerms {
        logp_new: &[-1.0],
        logp_old: &[-1.0],
        advantage: 0.5,
        logp_infer: Some(&[-1.0 - libm::log(5.0)]),
    };
    let l = grpo_loss(&[seq], &ClipConfig::GRPO, Some(&tis)).unwrap();
    assert!((l.objective - 1.0).abs() < 1e-12);
    assert!((l.grad[0][0] - 1.0).abs() < 1e-12);
    assert!(TisConfig { c: 1.0, enabled: true }.validate().is_err());
    assert!(grpo_loss(&[TokenTerms { logp_infer: None, ..seq }], &ClipConfig::GRPO, Some(&tis)).is_err());
}

#[test]
fn gspo_examples() {
    let c = ClipConfig::GSPO;
    let same = [
        SequenceTerms {
            seq_logp_new: -3.0,
            seq_logp_old: -3.0,
            len: 3,
            advantage: 1.0,
        },
        SequenceTerms {
            seq_logp_new: -1.0,
            seq_logp_old: -1.0,
            len: 1,
            advantage: -0.5,
        },
    ];
    assert!((gspo_loss(&same, &c).unwrap().objective - 0.25).abs() < 1e-12);
    // two tokens with gap g each and one token with gap g share a ratio
    let g = 0.013;
    let two = gspo_loss(&[SequenceTerms { seq_logp_new: 2.0 * g, seq_logp_old: 0.0, len: 2, advantage: -1.0 }], &c).unwrap();
    let one = gspo_loss(&[SequenceTerms { seq_logp_new: g, seq_logp_old: 0.0, len: 1, advantage: -1.0 }], &c).unwrap();
    assert!((two.objective - one.objective).abs() < 1e-12);
    let s = 1.0 + 2.0 * c.eps_high;
    let cl = gspo_loss(&[SequenceTerms { seq_logp_new: libm::log(s), seq_logp_old: 0.0, len: 1, advantage: 1.0 }], &c).unwrap();
    assert!((cl.objective - (1.0 + c.eps_high)).abs() < 1e-12);
    assert_eq!(cl.grad[0][0], 0.0);
    assert!(gspo_loss(&[SequenceTerms { seq_logp_new: 0.0, seq_logp_old: 0.0, len: 0, advantage: 1.0 }], &c).is_err());
}

fn with_rewards(mut r: crate::model::Rollout, reward: f64, group: u64) -> crate::model::Rollout {
    r.reward = reward;
    r.group = group;
    r
}

#[test]
fn dynamic_sampling_keeps_mixed_groups() {
    assert!(!is_informative(&[1.0; 4]));
    assert!(!is_informative(&[0.0; 4]));
    assert!(is_informative(&[1.0, 0.0, 1.0, 0.0]));
    let (p, e) = (tiny(), EngineProfile::canonical());
    let r = sample_rollout(&[1, 2], &p, &e, &SamplingConfig { max_tokens: 2, ..Default::default() }, 0).unwrap();
    let group = |rs: &[f64]| rs.iter().map(|&x| with_rewards(r.clone(), x, 0)).collect::<Vec<_>>();
    let kept = dynamic_sampling_filter(vec![group(&[1.0; 4]), group(&[0.0; 4]), group(&[1.0, 0.0, 1.0, 0.0])]);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0][1].reward, 0.0);
}

fn tiny() -> PolicyParams {
    let cfg = ModelConfig {
        vocab: 6,
        d_model: 8,
        layers: 2,
        heads: 2,
        experts: 4,
        top_k: 2,
        max_seq_len: 10,
        expert_hidden: 6,
    };
    PolicyParams::init(cfg, InitOptions { seed: 13, router_scale: 3.0, ..Default::default() }).unwrap()
}

fn batch(p: &PolicyParams, infer: &EngineProfile, n_groups: u64) -> Vec<crate::model::Rollout> {
    let s = SamplingConfig {
        temperature: 1.0,
        max_tokens: 4,
        stop: vec![5],
    };
    let mut out = Vec::new();
    for g in 0..n_groups {
        for i in 0..4u64 {
            let r = sample_rollout(&[1 + g as u32 % 4, 2], p, infer, &s, g * 10 + i).unwrap();
            let reward = (r.response[0] % 2) as f64;
            out.push(with_rewards(r, reward, g));
        }
    }
    out
}

fn cfg(replay: ReplaySource) -> TrainStepConfig {
    TrainStepConfig {
        replay,
        group_size: 4,
        batch_size: 8,
        learning_rate: 0.1,
        ..TrainStepConfig::default()
    }
}

#[test]
fn recompute_replay_degenerates_with_one_mini_step() {
    let mut p = tiny();
    let infer = EngineProfile::canonical();
    let train = EngineProfile::default_training().with_jitter(0.05);
    let b = batch(&p, &infer, 2);
    let out = train_step(&b, &mut p, &cfg(ReplaySource::Recompute), &train, 0).unwrap();
    assert!(out.first_update_exact);
    assert_eq!(out.update_traces, out.recompute_traces);
    assert_eq!(out.metrics.method, Method::Grpo);
}

#[test]
fn rollout_replay_pins_every_stage_to_rollout_masks() {
    let mut p = tiny();
    let infer = EngineProfile::canonical();
    let train = EngineProfile::default_training().with_jitter(0.05);
    let b = batch(&p, &infer, 2);
    let c = TrainStepConfig {
        mini_steps: 2,
        ..cfg(ReplaySource::Rollout)
    };
    let out = train_step(&b, &mut p, &c, &train, 0).unwrap();
    for (i, r) in b.iter().enumerate() {
        assert_eq!(out.recompute_traces[i], r.trace);
        assert_eq!(out.update_traces[i], r.trace);
    }
    // same engine on both sides: no divergence at all
    let mut q = tiny();
    let same = train_step(&b, &mut q, &cfg(ReplaySource::Rollout), &infer, 0).unwrap();
    assert_eq!(same.metrics.kl_k3, 0.0);
    assert_eq!(same.metrics.f_tau2, 0.0);
    let mut broken = b.clone();
    broken[0].trace = broken[0].trace.prefix(1);
    assert!(train_step(&broken, &mut tiny(), &cfg(ReplaySource::Rollout), &train, 0).is_err());
}

#[test]
fn positive_advantage_raises_rewarded_logprob() {
    let p0 = tiny();
    let e = EngineProfile::canonical();
    let b = batch(&p0, &e, 2);
    let mut p = p0.clone();
    let c = TrainStepConfig {
        learning_rate: 1e-3,
        ..cfg(ReplaySource::Rollout)
    };
    train_step(&b, &mut p, &c, &e, 0).unwrap();
    let adv = advantages(&b);
    for (r, a) in b.iter().zip(adv) {
        if a > 0.0 {
            let o = ForwardOptions::replaying(&r.trace);
            let before: f64 = forward_logprobs(&r.tokens(), 2, &p0, &e, &o).unwrap().logprobs.iter().sum();
            let after: f64 = forward_logprobs(&r.tokens(), 2, &p, &e, &o).unwrap().logprobs.iter().sum();
            assert!(after > before, "{after} <= {before}");
        }
    }
}

fn advantages(b: &[crate::model::Rollout]) -> Vec<f64> {
    super::step::tests_support::advantages(b)
}

#[test]
fn metrics_are_invariant_to_batch_order() {
    let p = tiny();
    let infer = EngineProfile::canonical();
    let train = EngineProfile::default_training().with_jitter(0.05);
    let b = batch(&p, &infer, 2);
    let mut rev = b.clone();
    rev.reverse();
    let c = cfg(ReplaySource::None);
    let a = train_step(&b, &mut p.clone(), &c, &train, 3).unwrap().metrics;
    let z = train_step(&rev, &mut p.clone(), &c, &train, 3).unwrap().metrics;
    assert_eq!(a.kl_k3.to_bits(), z.kl_k3.to_bits());
    assert_eq!(a.f_tau2, z.f_tau2);
    assert_eq!(a.step, 3);
}

#[test]
fn config_validation() {
    assert!(TrainStepConfig::default().validate().is_ok());
    assert!(TrainStepConfig { mini_steps: 0, ..Default::default() }.validate().is_err());
    assert!(TrainStepConfig { batch_size: 12, ..Default::default() }.validate().is_err());
    let gspo_tis = TrainStepConfig {
        method: Method::Gspo,
        tis: TisConfig { c: 2.0, enabled: true },
        ..Default::default()
    };
    assert!(gspo_tis.validate().is_err());
    assert_eq!("recompute".parse::<ReplaySource>().unwrap(), ReplaySource::Recompute);
    assert!("sometimes".parse::<Method>().is_err());
}
