//! Building the starting policy and sampling task rollouts from it.

use r3_core::engine::EngineProfile;
use r3_core::model::{sample_rollout, PolicyParams, Rollout, SamplingConfig};
use r3_core::rl::{sft_step, Adam};
use r3_core::rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::io;
use crate::task::SortTask;

/// Prompt indices below this are left to RL and diagnostics; warm-up
/// prompts are drawn above it.
const SFT_PROMPT_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SftRecord {
    pub sft_step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Load `init.checkpoint` if set, otherwise initialize from `init.*` and
/// run the supervised warm-up.
pub fn prepare_policy(cfg: &ExperimentConfig, task: &SortTask) -> Result<(PolicyParams, Vec<SftRecord>)> {
    if let Some(path) = &cfg.init_checkpoint {
        let params = io::load_checkpoint(path)?;
        if *params.config() != cfg.model {
            return Err(LabError::config("init.checkpoint", "checkpoint architecture differs from model.*"));
        }
        return Ok((params, Vec::new()));
    }
    let mut params = PolicyParams::init(cfg.model, cfg.init)?;
    let mut opt = Adam::new(cfg.sft.learning_rate);
    let mut log = Vec::with_capacity(cfg.sft.steps);
    for s in 0..cfg.sft.steps {
        let batch: Vec<_> = (0..cfg.sft.batch)
            .map(|j| task.sft_example(task.train_prompt(SFT_PROMPT_BASE + (s * cfg.sft.batch + j) as u64)))
            .collect();
        let out = sft_step(&mut params, &batch, &mut opt, &cfg.train_engine)?;
        log.push(SftRecord {
            sft_step: s + 1,
            loss: out.loss,
            grad_norm: out.grad_norm,
        });
    }
    Ok((params, log))
}

pub fn sampling(task: &SortTask, temperature: f64) -> SamplingConfig {
    SamplingConfig {
        temperature,
        max_tokens: task.config().max_new_tokens(),
        stop: vec![task.config().eos()],
    }
}

/// `size` scored samples for one prompt, tagged with group id `group`.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    task: &SortTask,
    params: &PolicyParams,
    engine: &EngineProfile,
    prompt: &[u32],
    size: usize,
    temperature: f64,
    seed: u64,
    group: u64,
) -> Result<Vec<Rollout>> {
    let sc = sampling(task, temperature);
    (0..size)
        .map(|m| {
            let mut r = sample_rollout(prompt, params, engine, &sc, rng::hash3(seed, group, m as u64))?;
            r.reward = task.reward(&r.prompt, &r.response);
            r.group = group;
            Ok(r)
        })
        .collect()
}

/// Exact-match accuracy of greedy decoding over the evaluation prompts.
pub fn greedy_accuracy(task: &SortTask, params: &PolicyParams, engine: &EngineProfile) -> Result<f64> {
    let sc = sampling(task, 0.0);
    let prompts = task.eval_prompts();
    let mut correct = 0usize;
    for p in prompts {
        let r = sample_rollout(p, params, engine, &sc, 0)?;
        if task.reward(p, &r.response) > 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / prompts.len() as f64)
}
