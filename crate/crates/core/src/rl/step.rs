use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{group_advantages, grpo_loss, gspo_loss, ClipConfig, Method, ReplaySource, Sgd, SequenceTerms, TisConfig, TokenTerms};
use crate::autodiff::Tape;
use crate::diagnostics::{extreme_fraction, kl_k3, records_for_sequence, TokenProbRecord};
use crate::engine::EngineProfile;
use crate::error::{Error, Result};
use crate::model::{forward_logprobs, forward_tape, ForwardOptions, ParamVars, PolicyParams, PolicySnapshot, Rollout, RoutingTrace};

/// Settings of one global training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepConfig {
    pub method: Method,
    pub replay: ReplaySource,
    pub mini_steps: usize,
    pub learning_rate: f64,
    pub group_size: usize,
    pub batch_size: usize,
    pub clip: ClipConfig,
    pub tis: TisConfig,
    pub dynamic_sampling: bool,
    pub max_grad_norm: f64,
}

impl Default for TrainStepConfig {
    fn default() -> Self {
        Self {
            method: Method::Grpo,
            replay: ReplaySource::Rollout,
            mini_steps: 1,
            learning_rate: 0.05,
            group_size: 8,
            batch_size: 64,
            clip: ClipConfig::GRPO,
            tis: TisConfig::default(),
            dynamic_sampling: true,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainStepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if self.mini_steps == 0 {
            return bad("mini_steps must be at least 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(self.group_size) {
            return bad("batch_size must be a positive multiple of group_size");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.tis.enabled && self.method == Method::Gspo {
            return bad("TIS applies to the token-level objective only");
        }
        self.clip.validate()?;
        self.tis.validate()
    }
}

/// One JSONL line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub reward_mean: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub kl_k3: f64,
    pub f_tau2: f64,
    pub resp_len_mean: f64,
    pub method: Method,
    pub replay: ReplaySource,
    pub mini_steps: usize,
}

/// Everything a step measured, beyond the logged metrics.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    /// `(logp_infer, logp_train(theta_old))` for every response token.
    pub records: Vec<TokenProbRecord>,
    /// Largest `|logp_new - logp_old|` in the first minibatch, before any
    /// parameter change.
    pub first_update_max_gap: f64,
    /// Whether that first minibatch reproduced `logp_old` bit for bit.
    pub first_update_exact: bool,
    /// Mean fraction of clipped units over mini-steps.
    pub clip_fraction: f64,
    pub objective: f64,
    pub recompute_traces: Vec<RoutingTrace>,
    /// Masks each rollout was routed with in the update stage (last
    /// mini-step that touched it).
    pub update_traces: Vec<RoutingTrace>,
}

pub(crate) fn advantages(batch: &[Rollout]) -> Result<Vec<f64>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in batch.iter().enumerate() {
        groups.entry(r.group).or_default().push(i);
    }
    let mut adv = vec![0.0; batch.len()];
    for members in groups.values() {
        let rewards: Vec<f64> = members.iter().map(|&i| batch[i].reward).collect();
        for (&i, a) in members.iter().zip(group_advantages(&rewards)?) {
            adv[i] = a;
        }
    }
    Ok(adv)
}

fn minibatches(n: usize, k: usize) -> Vec<core::ops::Range<usize>> {
    let k = k.min(n).max(1);
    (0..k).map(|i| (i * n / k)..((i + 1) * n / k)).collect()
}

/// Recompute old-policy probabilities, then apply `mini_steps` clipped
/// policy-gradient updates to `params`.
pub fn train_step(
    batch: &[Rollout],
    params: &mut PolicyParams,
    cfg: &TrainStepConfig,
    train_engine: &EngineProfile,
    step: u64,
) -> Result<StepOutcome> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if batch.iter().any(|r| r.response.is_empty()) {
        return Err(Error::Invalid("rollout with empty response".into()));
    }
    if cfg.replay == ReplaySource::Rollout && batch.iter().any(|r| r.trace.len() != r.prompt.len() + r.response.len()) {
        return Err(Error::TraceMismatch);
    }
    let old = PolicySnapshot::new(step, params);
    let adv = advantages(batch)?;
    let tokens: Vec<Vec<u32>> = batch.iter().map(Rollout::tokens).collect();

    // recompute stage
    let mut logp_old = Vec::with_capacity(batch.len());
    let mut recompute_traces = Vec::with_capacity(batch.len());
    let mut records = Vec::new();
    let mut entropy_sum = 0.0;
    for (i, r) in batch.iter().enumerate() {
        let opts = ForwardOptions {
            replay: (cfg.replay == ReplaySource::Rollout).then_some(&r.trace),
            temperature: r.scoring_temperature(),
            ..Default::default()
        };
        let f = forward_logprobs(&tokens[i], r.prompt.len(), &old, train_engine, &opts)?;
        records.extend(records_for_sequence(&r.logprobs, &f.logprobs, i)?);
        entropy_sum += f.entropies.iter().sum::<f64>();
        logp_old.push(f.logprobs);
        recompute_traces.push(f.trace);
    }

    // update stage
    let sgd = Sgd {
        learning_rate: cfg.learning_rate,
        max_grad_norm: cfg.max_grad_norm,
    };
    let mut update_traces = recompute_traces.clone();
    let mut first_update_max_gap = 0.0f64;
    let mut first_update_exact = true;
    let (mut grad_norm_sum, mut clip_sum, mut objective_sum) = (0.0, 0.0, 0.0);
    let chunks = minibatches(batch.len(), cfg.mini_steps);
    for (k, range) in chunks.iter().enumerate() {
        let s = range.len() as f64;
        let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let (mut obj, mut clip_frac) = (0.0, 0.0);
        for i in range.clone() {
            let r = &batch[i];
            let replay = match cfg.replay {
                ReplaySource::Rollout => Some(&r.trace),
                ReplaySource::Recompute => Some(&recompute_traces[i]),
                ReplaySource::None => None,
            };
            let opts = ForwardOptions {
                replay,
                temperature: r.scoring_temperature(),
                ..Default::default()
            };
            let mut tape = Tape::new();
            let vars = ParamVars::register(&mut tape, params);
            let out = forward_tape(&mut tape, params, &vars, &tokens[i], r.prompt.len(), train_engine, &opts)?;
            let new = tape.value(out.logprobs).data().to_vec();
            if k == 0 {
                for (a, b) in new.iter().zip(&logp_old[i]) {
                    first_update_max_gap = first_update_max_gap.max(libm::fabs(a - b));
                    first_update_exact &= a.to_bits() == b.to_bits();
                }
            }
            let seed: Vec<f64> = match cfg.method {
                Method::Grpo => {
                    let terms = TokenTerms {
                        logp_new: &new,
                        logp_old: &logp_old[i],
                        advantage: adv[i],
                        logp_infer: Some(&r.logprobs),
                    };
                    let l = grpo_loss(&[terms], &cfg.clip, cfg.tis.enabled.then_some(&cfg.tis))?;
                    obj += l.objective / s;
                    clip_frac += l.clip_fraction * new.len() as f64;
                    l.grad[0].iter().map(|g| g / s).collect()
                }
                Method::Gspo => {
                    let terms = SequenceTerms {
                        seq_logp_new: new.iter().sum(),
                        seq_logp_old: logp_old[i].iter().sum(),
                        len: new.len(),
                        advantage: adv[i],
                    };
                    let l = gspo_loss(&[terms], &cfg.clip)?;
                    obj += l.objective / s;
                    clip_frac += l.clip_fraction * new.len() as f64;
                    vec![l.grad[0][0] / s; new.len()]
                }
            };
            let g = vars.collect(&tape.backward_seeded(out.logprobs, &seed)?, params);
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(gi) {
                    *a += b;
                }
            }
            update_traces[i] = out.trace;
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("policy gradient"));
        }
        let toks: usize = range.clone().map(|i| batch[i].response.len()).sum();
        clip_sum += clip_frac / toks as f64;
        objective_sum += obj;
        grad_norm_sum += sgd.ascend(params, grads);
    }
    let m = chunks.len() as f64;
    let total_tokens = records.len();
    let metrics = StepMetrics {
        step,
        reward_mean: batch.iter().map(|r| r.reward).sum::<f64>() / batch.len() as f64,
        entropy: entropy_sum / total_tokens as f64,
        grad_norm: grad_norm_sum / m,
        kl_k3: kl_k3(&records)?,
        f_tau2: extreme_fraction(&records, 2.0)?,
        resp_len_mean: total_tokens as f64 / batch.len() as f64,
        method: cfg.method,
        replay: cfg.replay,
        mini_steps: cfg.mini_steps,
    };
    Ok(StepOutcome {
        metrics,
        records,
        first_update_max_gap,
        first_update_exact,
        clip_fraction: clip_sum / m,
        objective: objective_sum / m,
        recompute_traces,
        update_traces,
    })
}

#[cfg(test)]
pub(crate) mod tests_support {
    pub fn advantages(b: &[super::Rollout]) -> alloc::vec::Vec<f64> {
        super::advantages(b).unwrap()
    }
}
