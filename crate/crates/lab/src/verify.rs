//! Invariant gauntlet for routing replay. Failures are report content,
//! not errors.

use r3_core::autodiff::{grad_check, Tape};
use r3_core::engine::EngineProfile;
use r3_core::mask_store::{deserialize_trace, scope_fingerprint, serialize_trace, TraceStore, DEFAULT_CAPACITY};
use r3_core::model::{
    forward_logprobs, forward_tape, generate, ForwardOptions, ParamVars, PolicyParams, Rollout, RoutingTrace,
};
use r3_core::tensor::Tensor;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::io;
use crate::policy::{prepare_policy, sample_group, sampling};
use crate::task::SortTask;

pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
/// Sequence length used by the gradient checks.
const GRAD_TOKENS: usize = 6;
const VERIFY_SEED: u64 = 0x7665_7269;
/// Prompt indices for multi-turn scenarios, away from training prompts.
const TURN_PROMPT_BASE: u64 = 1 << 41;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The measured quantity the verdict rests on.
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Replaying a rollout's own masks under the engine that produced it must
/// reproduce both its masks and its logprobs bit for bit.
fn self_replay(params: &PolicyParams, engine: &EngineProfile, rollouts: &[Rollout], traces: &[RoutingTrace]) -> Result<Check> {
    let mut mismatched_tokens = 0usize;
    let mut mask_mismatch = 0usize;
    let mut total = 0usize;
    for (r, trace) in rollouts.iter().zip(traces) {
        let tokens = r.tokens();
        let opts = ForwardOptions {
            replay: Some(trace),
            temperature: r.scoring_temperature(),
            ..Default::default()
        };
        let replayed = forward_logprobs(&tokens, r.prompt.len(), params, engine, &opts)?;
        let free = forward_logprobs(
            &tokens,
            r.prompt.len(),
            params,
            engine,
            &ForwardOptions {
                temperature: r.scoring_temperature(),
                ..Default::default()
            },
        )?;
        total += r.response.len();
        mismatched_tokens += replayed
            .logprobs
            .iter()
            .zip(&r.logprobs)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        if free.trace != replayed.trace {
            mask_mismatch += 1;
        }
    }
    let frac = mismatched_tokens as f64 / total.max(1) as f64;
    Ok(Check {
        name: "self_replay_identity",
        passed: mismatched_tokens == 0 && mask_mismatch == 0,
        value: frac,
        detail: format!(
            "{mismatched_tokens}/{total} response logprobs differ; {mask_mismatch}/{} traces differ from free routing",
            rollouts.len()
        ),
    })
}

/// A short teacher-forced prefix of `rollout`, scored from position 2.
fn grad_sequence(rollout: &Rollout) -> (Vec<u32>, usize) {
    let mut tokens = rollout.tokens();
    tokens.truncate(GRAD_TOKENS);
    (tokens, 2)
}

/// Central differences against the taped gradient of a weighted sum of
/// logprobs, with respect to every router weight, under replayed masks.
fn grad_flow(params: &PolicyParams, rollout: &Rollout) -> Result<Check> {
    let e = EngineProfile::canonical();
    let (tokens, prompt) = grad_sequence(rollout);
    let trace = rollout.trace.prefix(tokens.len());
    let opts = ForwardOptions::replaying(&trace);
    let weights: Vec<f64> = (0..tokens.len() - prompt).map(|i| 1.0 - 0.37 * i as f64).collect();
    let mut worst = 0.0f64;
    for b in &params.layout().blocks {
        let slot = b.router;
        let err = grad_check(
            |t, v| {
                let mut vars = ParamVars::register(t, params);
                vars.vars[slot] = v;
                let out = forward_tape(t, params, &vars, &tokens, prompt, &e, &opts)?;
                let w = t.constant(Tensor::vector(weights.clone()));
                let prod = t.mul(out.logprobs, w)?;
                t.sum(prod)
            },
            params.tensor(slot),
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(Check {
        name: "router_gradient_flow",
        passed: worst <= GRAD_TOLERANCE,
        value: worst,
        detail: format!("max relative error {worst:.3e} over all router weights (tolerance {GRAD_TOLERANCE:e})"),
    })
}

/// Experts absent from every replayed mask of a layer get exactly zero
/// gradient; experts present get some.
fn unselected_experts(params: &PolicyParams, rollout: &Rollout) -> Result<Check> {
    let e = EngineProfile::canonical();
    let (tokens, prompt) = grad_sequence(rollout);
    let trace = rollout.trace.prefix(tokens.len());
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let out = forward_tape(&mut tape, params, &vars, &tokens, prompt, &e, &ForwardOptions::replaying(&trace))?;
    let total = tape.sum(out.logprobs)?;
    let g = vars.collect(&tape.backward(total)?, params);
    let (mut unselected, mut leaked, mut dead) = (0usize, 0usize, 0usize);
    for (l, b) in params.layout().blocks.iter().enumerate() {
        let used: Vec<u16> = (0..tokens.len()).flat_map(|t| trace.mask(t, l).to_vec()).collect();
        for (ei, ex) in b.experts.iter().enumerate() {
            let nonzero = [ex.w1, ex.b1, ex.w2, ex.b2].iter().any(|&s| g[s].iter().any(|v| *v != 0.0));
            if used.contains(&(ei as u16)) {
                dead += usize::from(!nonzero);
            } else {
                unselected += 1;
                leaked += usize::from(nonzero);
            }
        }
    }
    Ok(Check {
        name: "unselected_expert_gradient",
        passed: leaked == 0 && unselected > 0,
        value: leaked as f64,
        detail: format!("{leaked}/{unselected} unselected experts received gradient; {dead} selected experts got none"),
    })
}

/// Serialization and store lookups return the masks that went in.
fn cache_round_trip(params: &PolicyParams, engine: &EngineProfile, rollouts: &[Rollout]) -> Result<Check> {
    let c = params.config();
    let fp = scope_fingerprint(engine, params);
    let mut store = TraceStore::new(c.layers, c.experts, c.top_k, DEFAULT_CAPACITY);
    let mut bad = 0usize;
    for r in rollouts {
        let decoded = deserialize_trace(&serialize_trace(&r.trace))?;
        if decoded != *r.trace.masks() {
            bad += 1;
        }
        store.put(fp, r.trace.tokens(), &r.trace)?;
    }
    for r in rollouts {
        let got = store.get_longest_prefix(fp, r.trace.tokens());
        if got != r.trace {
            bad += 1;
        }
        let other = store.get_longest_prefix(fp ^ 1, r.trace.tokens());
        if !other.is_empty() {
            bad += 1;
        }
    }
    Ok(Check {
        name: "cache_round_trip",
        passed: bad == 0,
        value: bad as f64,
        detail: format!("{bad} mismatches over {} traces", rollouts.len()),
    })
}

/// Multi-turn generation where each turn's prompt extends the previous
/// conversation: cached positions must need no top-k selection, and the
/// final conversation must match a from-scratch run.
fn multi_turn(cfg: &ExperimentConfig, task: &SortTask, params: &PolicyParams) -> Result<Check> {
    let engine = &cfg.infer;
    let c = params.config();
    let fp = scope_fingerprint(engine, params);
    let mut store = TraceStore::new(c.layers, c.experts, c.top_k, DEFAULT_CAPACITY);
    let sc = sampling(task, cfg.temperature);
    let (mut cached_calls, mut cached_positions) = (0usize, 0usize);
    let mut conversation: Vec<u32> = Vec::new();
    let mut last = None;
    for turn in 0..cfg.verify.turns {
        let mut prompt = conversation.clone();
        prompt.extend(task.train_prompt(TURN_PROMPT_BASE + turn as u64));
        if prompt.len() + 1 >= c.max_seq_len {
            break;
        }
        let cached = store.get_longest_prefix(fp, &prompt);
        let g = generate(&prompt, params, engine, &sc, VERIFY_SEED + turn as u64, Some(&cached))?;
        let fed = g.rollout.trace.len();
        // calls beyond the uncached positions were spent on cached ones
        cached_calls += g.topk_calls.saturating_sub((fed - cached.len()) * c.layers);
        cached_positions += cached.len();
        store.put(fp, g.rollout.trace.tokens(), &g.rollout.trace)?;
        conversation = g.rollout.tokens();
        last = Some((prompt, turn, g.rollout));
    }
    let Some((prompt, turn, cached_run)) = last else {
        return Ok(Check {
            name: "multi_turn_zero_recompute",
            passed: false,
            value: f64::NAN,
            detail: "model.max_seq_len too short for a single turn".into(),
        });
    };
    let scratch = generate(&prompt, params, engine, &sc, VERIFY_SEED + turn as u64, None)?.rollout;
    let replayed = forward_logprobs(
        &scratch.tokens(),
        scratch.prompt.len(),
        params,
        engine,
        &ForwardOptions {
            replay: Some(&cached_run.trace),
            temperature: scratch.scoring_temperature(),
            ..Default::default()
        },
    )?;
    let identical = scratch == cached_run
        && replayed.trace == scratch.trace
        && replayed.logprobs.iter().zip(&scratch.logprobs).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(Check {
        name: "multi_turn_zero_recompute",
        passed: cached_calls == 0 && cached_positions > 0 && identical,
        value: cached_calls as f64,
        detail: format!(
            "{cached_calls} top-k selections on {cached_positions} cached positions; replayed conversation {} from-scratch run",
            if identical { "matches" } else { "differs from" }
        ),
    })
}

pub fn run_replay_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let task = SortTask::new(cfg.task.clone());
    let (params, _) = prepare_policy(cfg, &task)?;
    let mut rollouts = Vec::with_capacity(cfg.verify.sequences);
    for i in 0..cfg.verify.sequences as u64 {
        let prompt = task.train_prompt(i);
        rollouts.extend(sample_group(&task, &params, &cfg.infer, &prompt, 1, cfg.temperature, VERIFY_SEED, i)?);
    }
    let mut traces: Vec<RoutingTrace> = rollouts.iter().map(|r| r.trace.clone()).collect();
    if cfg.verify.inject_corruption {
        // the position that produces the first response token
        traces[0].corrupt(rollouts[0].prompt.len() - 1, 0);
    }
    let checks = vec![
        self_replay(&params, &cfg.infer, &rollouts, &traces)?,
        grad_flow(&params, &rollouts[0])?,
        unselected_experts(&params, &rollouts[0])?,
        cache_round_trip(&params, &cfg.infer, &rollouts)?,
        multi_turn(cfg, &task, &params)?,
    ];
    let passed = checks.iter().all(|c| c.passed);
    let report = VerifyReport { checks, passed };
    io::create_dir(&cfg.output_dir)?;
    io::write_json(&cfg.output_dir.join("verify.json"), &report)?;
    Ok(report)
}
