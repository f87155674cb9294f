//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment. Unknown keys and
//! unparsable values are reported together, by key.

use std::path::{Path, PathBuf};

use r3_core::engine::{EngineProfile, PerturbScope, Precision, SoftmaxStyle, SumOrder};
use r3_core::model::{InitOptions, ModelConfig};
use r3_core::rl::{ClipConfig, Method, ReplaySource, TisConfig, TrainStepConfig};

use crate::error::{LabError, Result};
use crate::task::TaskConfig;

/// Supervised warm-up before RL.
#[derive(Debug, Clone, PartialEq)]
pub struct SftConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    pub rollouts: usize,
    pub repeats: usize,
    /// Sequences fed to the repeated-forward probe.
    pub repeat_sequences: usize,
    /// Rollout traces written to `traces/`.
    pub save_traces: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub sequences: usize,
    pub turns: usize,
    pub inject_corruption: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub init: InitOptions,
    pub init_checkpoint: Option<PathBuf>,
    pub infer: EngineProfile,
    pub train_engine: EngineProfile,
    pub task: TaskConfig,
    pub method: Method,
    pub replay: ReplaySource,
    pub mini_steps: usize,
    pub learning_rate: f64,
    pub group_size: usize,
    pub batch_size: usize,
    /// Explicit clip bounds; unset bounds default per method.
    pub eps_low: Option<f64>,
    pub eps_high: Option<f64>,
    pub tis: TisConfig,
    pub dynamic_sampling: bool,
    /// Generation rounds per step while filling a dynamic-sampling batch.
    pub max_sampling_rounds: usize,
    pub max_grad_norm: f64,
    pub max_steps: u64,
    pub eval_interval: u64,
    pub temperature: f64,
    pub seed: u64,
    pub sft: SftConfig,
    pub diagnose: DiagnoseConfig,
    pub verify: VerifyConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            init: InitOptions::default(),
            init_checkpoint: None,
            infer: EngineProfile::canonical().named("inference"),
            train_engine: EngineProfile::default_training(),
            task: TaskConfig::default(),
            method: Method::Grpo,
            replay: ReplaySource::Rollout,
            mini_steps: 1,
            learning_rate: 0.05,
            group_size: 8,
            batch_size: 64,
            eps_low: None,
            eps_high: None,
            tis: TisConfig::default(),
            dynamic_sampling: true,
            max_sampling_rounds: 8,
            max_grad_norm: 1.0,
            max_steps: 100,
            eval_interval: 5,
            temperature: 1.0,
            seed: 1,
            sft: SftConfig {
                steps: 0,
                batch: 32,
                learning_rate: 2e-3,
            },
            diagnose: DiagnoseConfig {
                rollouts: 512,
                repeats: 2,
                repeat_sequences: 128,
                save_traces: 8,
            },
            verify: VerifyConfig {
                sequences: 4,
                turns: 3,
                inject_corruption: false,
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got {v:?}")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

pub fn parse_precision(v: &str) -> std::result::Result<Precision, String> {
    match v {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        "f16" => Ok(Precision::F16),
        _ => Err(format!("unknown precision {v:?} (f64, f32, f16)")),
    }
}

pub fn parse_order(v: &str) -> std::result::Result<SumOrder, String> {
    match v {
        "left_to_right" => Ok(SumOrder::LeftToRight),
        "pairwise" => Ok(SumOrder::Pairwise),
        _ => match v.strip_prefix("blocked:") {
            Some(b) => match b.parse::<usize>() {
                Ok(n) if n > 0 => Ok(SumOrder::Blocked(n)),
                _ => Err(format!("bad block size in {v:?}")),
            },
            None => Err(format!("unknown order {v:?} (left_to_right, pairwise, blocked:B)")),
        },
    }
}

fn set_profile(p: &mut EngineProfile, field: &str, v: &str) -> Option<std::result::Result<(), String>> {
    let r = match field {
        "name" => {
            p.name = v.to_string();
            Ok(())
        }
        "precision" => parse_precision(v).map(|x| p.precision = x),
        "order" => parse_order(v).map(|x| p.order = x),
        "softmax" => match v {
            "max_subtracted" => Ok(SoftmaxStyle::MaxSubtracted),
            "unshifted" => Ok(SoftmaxStyle::Unshifted),
            _ => Err(format!("unknown softmax style {v:?}")),
        }
        .map(|x| p.softmax = x),
        "scope" => match v {
            "moe" => Ok(PerturbScope::Moe),
            "all" => Ok(PerturbScope::All),
            _ => Err(format!("unknown scope {v:?}")),
        }
        .map(|x| p.scope = x),
        "jitter" => parse_num::<f64>(v).and_then(|x| {
            if x >= 0.0 && x.is_finite() {
                p.jitter = x;
                Ok(())
            } else {
                Err("jitter must be >= 0".into())
            }
        }),
        "seed" => parse_num(v).map(|x| p.seed = x),
        "run_indexed" => parse_bool(v).map(|x| p.run_indexed = x),
        _ => return None,
    };
    Some(r)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse config text on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut bad: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bad.push((format!("line {}", lineno + 1), "expected `key = value`".into()));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if let Err(e) = cfg.set(k, v) {
                bad.push((k.to_string(), e));
            }
        }
        if !bad.is_empty() {
            return Err(LabError::Config {
                keys: bad.iter().map(|(k, _)| k.clone()).collect(),
                detail: bad.iter().map(|(k, e)| format!("{k}: {e}")).collect::<Vec<_>>().join("; "),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one key. Errors name the problem with the value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        if let Some(field) = key.strip_prefix("infer.") {
            return set_profile(&mut self.infer, field, v).unwrap_or_else(|| Err("unknown key".into()));
        }
        if let Some(field) = key.strip_prefix("train.") {
            return set_profile(&mut self.train_engine, field, v).unwrap_or_else(|| Err("unknown key".into()));
        }
        let m = &mut self.model;
        match key {
            "model.vocab" => m.vocab = parse_num(v)?,
            "model.d_model" => m.d_model = parse_num(v)?,
            "model.layers" => m.layers = parse_num(v)?,
            "model.heads" => m.heads = parse_num(v)?,
            "model.experts" => m.experts = parse_num(v)?,
            "model.top_k" => m.top_k = parse_num(v)?,
            "model.max_seq_len" => m.max_seq_len = parse_num(v)?,
            "model.expert_hidden" => m.expert_hidden = parse_num(v)?,
            "init.seed" => self.init.seed = parse_num(v)?,
            "init.router_scale" => self.init.router_scale = parse_num(v)?,
            "init.expert_out_scale" => self.init.expert_out_scale = parse_num(v)?,
            "init.lm_head_scale" => self.init.lm_head_scale = parse_num(v)?,
            "init.checkpoint" => self.init_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "task.alphabet" => self.task.alphabet = parse_num(v)?,
            "task.min_len" => self.task.min_len = parse_num(v)?,
            "task.max_len" => self.task.max_len = parse_num(v)?,
            "task.seed" => self.task.seed = parse_num(v)?,
            "task.eval_prompts" => self.task.eval_prompts = parse_num(v)?,
            "rl.method" => self.method = v.parse().map_err(|e: r3_core::Error| e.to_string())?,
            "rl.replay" => self.replay = v.parse().map_err(|e: r3_core::Error| e.to_string())?,
            "rl.mini_steps" => self.mini_steps = parse_num(v)?,
            "rl.learning_rate" => self.learning_rate = parse_num(v)?,
            "rl.group_size" => self.group_size = parse_num(v)?,
            "rl.batch_size" => self.batch_size = parse_num(v)?,
            "rl.eps_low" => self.eps_low = Some(parse_num(v)?),
            "rl.eps_high" => self.eps_high = Some(parse_num(v)?),
            "rl.tis" => self.tis.enabled = parse_bool(v)?,
            "rl.tis_c" => self.tis.c = parse_num(v)?,
            "rl.dynamic_sampling" => self.dynamic_sampling = parse_bool(v)?,
            "rl.max_sampling_rounds" => self.max_sampling_rounds = parse_num(v)?,
            "rl.max_grad_norm" => self.max_grad_norm = parse_num(v)?,
            "rl.temperature" => self.temperature = parse_num(v)?,
            "run.max_steps" => self.max_steps = parse_num(v)?,
            "run.eval_interval" => self.eval_interval = parse_num(v)?,
            "run.seed" => self.seed = parse_num(v)?,
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "sft.steps" => self.sft.steps = parse_num(v)?,
            "sft.batch" => self.sft.batch = parse_num(v)?,
            "sft.learning_rate" => self.sft.learning_rate = parse_num(v)?,
            "diagnose.rollouts" => self.diagnose.rollouts = parse_num(v)?,
            "diagnose.repeats" => self.diagnose.repeats = parse_num(v)?,
            "diagnose.repeat_sequences" => self.diagnose.repeat_sequences = parse_num(v)?,
            "diagnose.save_traces" => self.diagnose.save_traces = parse_num(v)?,
            "verify.sequences" => self.verify.sequences = parse_num(v)?,
            "verify.turns" => self.verify.turns = parse_num(v)?,
            "verify.inject_corruption" => self.verify.inject_corruption = parse_bool(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// The step configuration handed to the trainer.
    pub fn step_config(&self) -> TrainStepConfig {
        let base = match self.method {
            Method::Grpo => ClipConfig::GRPO,
            Method::Gspo => ClipConfig::GSPO,
        };
        TrainStepConfig {
            method: self.method,
            replay: self.replay,
            mini_steps: self.mini_steps,
            learning_rate: self.learning_rate,
            group_size: self.group_size,
            batch_size: self.batch_size,
            clip: ClipConfig {
                eps_low: self.eps_low.unwrap_or(base.eps_low),
                eps_high: self.eps_high.unwrap_or(base.eps_high),
            },
            tis: self.tis,
            dynamic_sampling: self.dynamic_sampling,
            max_grad_norm: self.max_grad_norm,
        }
    }

    /// Check cross-field constraints, reporting every offending key.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<(&str, String)> = Vec::new();
        if let Err(e) = self.model.validate() {
            bad.push(("model.*", e.to_string()));
        }
        if let Err(e) = self.task.validate() {
            bad.push(("task.*", e));
        }
        if self.task.vocab_size() > self.model.vocab {
            bad.push(("task.alphabet", format!("needs vocab {} but model.vocab = {}", self.task.vocab_size(), self.model.vocab)));
        }
        if self.task.max_sequence_len() > self.model.max_seq_len {
            bad.push((
                "model.max_seq_len",
                format!("task sequences reach {} tokens", self.task.max_sequence_len()),
            ));
        }
        let step = self.step_config();
        if self.mini_steps == 0 {
            bad.push(("rl.mini_steps", "must be >= 1".into()));
        }
        if self.group_size < 2 {
            bad.push(("rl.group_size", "must be >= 2".into()));
        }
        if self.batch_size == 0 || self.group_size == 0 || !self.batch_size.is_multiple_of(self.group_size) {
            bad.push(("rl.batch_size", "must be a positive multiple of rl.group_size".into()));
        }
        if !(self.learning_rate > 0.0) {
            bad.push(("rl.learning_rate", "must be positive".into()));
        }
        if step.clip.validate().is_err() {
            bad.push(("rl.eps_low", "clip bounds must be positive with eps_low <= 1".into()));
        }
        if self.tis.validate().is_err() {
            bad.push(("rl.tis_c", "must exceed 1".into()));
        }
        if self.tis.enabled && self.method == Method::Gspo {
            bad.push(("rl.tis", "only supported with rl.method = grpo".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            bad.push(("rl.temperature", "must be >= 0".into()));
        }
        if self.max_sampling_rounds == 0 {
            bad.push(("rl.max_sampling_rounds", "must be >= 1".into()));
        }
        if self.eval_interval == 0 {
            bad.push(("run.eval_interval", "must be >= 1".into()));
        }
        if self.sft.steps > 0 && (self.sft.batch == 0 || !(self.sft.learning_rate > 0.0)) {
            bad.push(("sft.batch", "batch and learning rate must be positive".into()));
        }
        if self.diagnose.repeats < 2 {
            bad.push(("diagnose.repeats", "must be >= 2".into()));
        }
        if self.diagnose.rollouts == 0 {
            bad.push(("diagnose.rollouts", "must be >= 1".into()));
        }
        if self.verify.turns == 0 || self.verify.sequences == 0 {
            bad.push(("verify.turns", "turns and sequences must be >= 1".into()));
        }
        if bad.is_empty() {
            return Ok(());
        }
        Err(LabError::Config {
            keys: bad.iter().map(|(k, _)| k.to_string()).collect(),
            detail: bad.iter().map(|(k, e)| format!("{k}: {e}")).collect::<Vec<_>>().join("; "),
        })
    }
}
