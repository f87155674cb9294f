//! The RL loop: rollout, dynamic sampling, training step, periodic greedy
//! evaluation and best-checkpoint tracking.

use std::path::PathBuf;

use r3_core::model::Rollout;
use r3_core::rl::{is_informative, train_step, Method, ReplaySource, StepMetrics};
use r3_core::rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::io::{self, JsonlWriter};
use crate::policy::{greedy_accuracy, prepare_policy, sample_group};
use crate::task::SortTask;

const ROLLOUT_SEED_STREAM: u64 = 0x726f_6c6c;

/// Evaluations below this fraction of the running best count toward
/// collapse.
pub const COLLAPSE_FRACTION: f64 = 0.5;
/// Consecutive low evaluations that mark a collapse.
pub const COLLAPSE_PATIENCE: usize = 3;

/// First record of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunHeader {
    pub record: &'static str,
    pub method: Method,
    pub replay: ReplaySource,
    pub mini_steps: usize,
    pub batch_size: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub inference_profile: String,
    pub training_profile: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub accuracy: f64,
    pub best_accuracy: f64,
    pub best_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_accuracy: f64,
    pub best_step: u64,
    pub final_accuracy: f64,
    /// First step at which the collapse rule fired.
    pub collapse_step: Option<u64>,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub summary: TrainSummary,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalRecord>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct NanDump<'a> {
    step: u64,
    error: String,
    rollouts: Vec<DumpedRollout<'a>>,
}

#[derive(Debug, Serialize)]
struct DumpedRollout<'a> {
    prompt: &'a [u32],
    response: &'a [u32],
    logprobs: &'a [f64],
    reward: f64,
    group: u64,
}

/// Tracks the running best and the collapse rule.
#[derive(Debug, Default)]
struct EvalTracker {
    best: f64,
    best_step: u64,
    low_streak: usize,
    collapse_step: Option<u64>,
}

impl EvalTracker {
    /// Returns whether `acc` is a new best.
    fn observe(&mut self, step: u64, acc: f64) -> bool {
        let improved = acc > self.best || step == 0;
        if improved {
            self.best = acc;
            self.best_step = step;
        }
        if self.best > 0.0 && acc < COLLAPSE_FRACTION * self.best {
            self.low_streak += 1;
            if self.low_streak >= COLLAPSE_PATIENCE && self.collapse_step.is_none() {
                self.collapse_step = Some(step);
            }
        } else {
            self.low_streak = 0;
        }
        improved
    }
}

/// Sample informative groups until the batch is full or the round budget
/// runs out. `next_prompt` is advanced past every prompt consumed.
fn collect_batch(
    cfg: &ExperimentConfig,
    task: &SortTask,
    params: &r3_core::model::PolicyParams,
    step: u64,
    next_prompt: &mut u64,
) -> Result<Vec<Rollout>> {
    let groups_wanted = cfg.batch_size / cfg.group_size;
    let seed = rng::hash3(cfg.seed, ROLLOUT_SEED_STREAM, step);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut fallback = Vec::new();
    for _round in 0..cfg.max_sampling_rounds {
        for _ in 0..groups_wanted {
            if batch.len() == cfg.batch_size {
                break;
            }
            let id = *next_prompt;
            *next_prompt += 1;
            let prompt = task.train_prompt(id);
            let group = sample_group(task, params, &cfg.infer, &prompt, cfg.group_size, cfg.temperature, seed, id)?;
            let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
            if !cfg.dynamic_sampling || is_informative(&rewards) {
                batch.extend(group);
            } else if fallback.len() < cfg.batch_size {
                fallback.extend(group);
            }
        }
        if batch.len() == cfg.batch_size || !cfg.dynamic_sampling {
            break;
        }
    }
    if batch.is_empty() {
        // nothing informative: the step still runs, with zero advantages
        batch = fallback;
    }
    Ok(batch)
}

fn dump_batch(cfg: &ExperimentConfig, step: u64, batch: &[Rollout], err: &str) -> Result<PathBuf> {
    let path = cfg.output_dir.join("nan_dump.json");
    let dump = NanDump {
        step,
        error: err.to_string(),
        rollouts: batch
            .iter()
            .map(|r| DumpedRollout {
                prompt: &r.prompt,
                response: &r.response,
                logprobs: &r.logprobs,
                reward: r.reward,
                group: r.group,
            })
            .collect(),
    };
    io::write_json(&path, &dump)?;
    Ok(path)
}

fn metrics_finite(m: &StepMetrics) -> bool {
    [m.reward_mean, m.entropy, m.grad_norm, m.kl_k3, m.f_tau2, m.resp_len_mean]
        .iter()
        .all(|v| v.is_finite())
}

/// Run RL training and write `metrics.jsonl`, `eval.jsonl`,
/// `summary.json` and `best.r3ck` under `cfg.output_dir`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let step_cfg = cfg.step_config();
    let task = SortTask::new(cfg.task.clone());
    let dir = &cfg.output_dir;
    io::create_dir(dir)?;
    let (mut params, sft_log) = prepare_policy(cfg, &task)?;
    if !sft_log.is_empty() {
        let mut w = JsonlWriter::create(&dir.join("sft.jsonl"))?;
        for r in &sft_log {
            w.append(r)?;
        }
    }

    let mut metrics_out = JsonlWriter::create(&dir.join("metrics.jsonl"))?;
    metrics_out.append(&RunHeader {
        record: "header",
        method: cfg.method,
        replay: cfg.replay,
        mini_steps: cfg.mini_steps,
        batch_size: cfg.batch_size,
        group_size: cfg.group_size,
        learning_rate: cfg.learning_rate,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        inference_profile: cfg.infer.name.clone(),
        training_profile: cfg.train_engine.name.clone(),
    })?;
    let mut eval_out = JsonlWriter::create(&dir.join("eval.jsonl"))?;
    let best_path = dir.join("best.r3ck");

    let mut tracker = EvalTracker::default();
    let mut evals = Vec::new();
    let mut evaluate = |step: u64, params: &r3_core::model::PolicyParams, tracker: &mut EvalTracker| -> Result<f64> {
        let acc = greedy_accuracy(&task, params, &cfg.infer)?;
        if tracker.observe(step, acc) {
            io::save_checkpoint(&best_path, params)?;
        }
        let rec = EvalRecord {
            step,
            accuracy: acc,
            best_accuracy: tracker.best,
            best_step: tracker.best_step,
        };
        eval_out.append(&rec)?;
        evals.push(rec);
        Ok(acc)
    };
    let mut final_accuracy = evaluate(0, &params, &mut tracker)?;

    let mut metrics = Vec::new();
    let mut next_prompt = 0u64;
    let mut skipped = 0;
    for step in 1..=cfg.max_steps {
        let batch = collect_batch(cfg, &task, &params, step, &mut next_prompt)?;
        if batch.is_empty() {
            skipped += 1;
            continue;
        }
        let outcome = match train_step(&batch, &mut params, &step_cfg, &cfg.train_engine, step) {
            Ok(o) => o,
            Err(e @ (r3_core::Error::NonFinite(_) | r3_core::Error::DegenerateRatio)) => {
                let dump = dump_batch(cfg, step, &batch, &e.to_string())?;
                return Err(LabError::NonFinite { step, dump });
            }
            Err(e) => return Err(e.into()),
        };
        if !metrics_finite(&outcome.metrics) || !params.is_finite() {
            let dump = dump_batch(cfg, step, &batch, "non-finite metrics or parameters")?;
            return Err(LabError::NonFinite { step, dump });
        }
        metrics_out.append(&outcome.metrics)?;
        metrics.push(outcome.metrics);
        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            final_accuracy = evaluate(step, &params, &mut tracker)?;
        }
    }

    let summary = TrainSummary {
        steps: cfg.max_steps,
        best_accuracy: tracker.best,
        best_step: tracker.best_step,
        final_accuracy,
        collapse_step: tracker.collapse_step,
        skipped_steps: skipped,
    };
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(TrainReport {
        summary,
        metrics,
        evals,
        output_dir: dir.clone(),
    })
}
