//! Policy-gradient training: group-relative advantages, clipped token and
//! sequence objectives, truncated importance sampling and the training step.

mod optim;
mod sft;
mod step;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Rollout;

pub use optim::{clip_grad_norm, Adam, Sgd};
pub use sft::{sft_step, SftExample, SftOutcome};
pub use step::{train_step, StepMetrics, StepOutcome, TrainStepConfig};

/// Ratio clipping range `[1 - low, 1 + high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipConfig {
    pub const GRPO: Self = Self {
        eps_low: 0.2,
        eps_high: 0.27,
    };
    pub const GSPO: Self = Self {
        eps_low: 3e-4,
        eps_high: 4e-4,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low <= 1.0 && self.eps_high > 0.0) {
            return Err(Error::Invalid(format!("bad clip range {self:?}")));
        }
        Ok(())
    }

    fn clamp(&self, w: f64) -> f64 {
        w.clamp(1.0 - self.eps_low, 1.0 + self.eps_high)
    }

    /// `min(w*a, clip(w)*a)` and its derivative with respect to `w`.
    fn surrogate(&self, w: f64, a: f64) -> (f64, f64) {
        let raw = w * a;
        let clipped = self.clamp(w) * a;
        if raw <= clipped {
            (raw, a)
        } else {
            (clipped, 0.0)
        }
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self::GRPO
    }
}

/// Truncated importance sampling between the two engines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TisConfig {
    pub c: f64,
    pub enabled: bool,
}

impl Default for TisConfig {
    fn default() -> Self {
        Self { c: 2.0, enabled: false }
    }
}

impl TisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 1.0) {
            return Err(Error::Invalid(format!("TIS ceiling must exceed 1, got {}", self.c)));
        }
        Ok(())
    }

    /// `min(exp(logp_old_train - logp_infer), C)`.
    pub fn multiplier(&self, logp_old_train: f64, logp_infer: f64) -> Result<f64> {
        let r = libm::exp(logp_old_train - logp_infer);
        if !r.is_finite() {
            return Err(Error::DegenerateRatio);
        }
        Ok(r.min(self.c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Grpo,
    Gspo,
}

/// Where the update forward takes its routing masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplaySource {
    /// Masks captured during the rollout, in both recompute and update.
    Rollout,
    /// Masks captured by the recompute forward, replayed into the update.
    Recompute,
    None,
}

macro_rules! name_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl $t {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $(Self::$v => $s),+
                }
            }
        }

        impl core::str::FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    other => Err(Error::Invalid(format!("unknown {} {other:?}", stringify!($t)))),
                }
            }
        }

        impl core::fmt::Display for $t {
            fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

name_enum!(Method, Grpo => "grpo", Gspo => "gspo");
name_enum!(ReplaySource, Rollout => "rollout", Recompute => "recompute", None => "none");

/// `(r - mean) / (std + 1e-6)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Invalid("group advantages need at least two rewards".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = libm::sqrt(var) + 1e-6;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Inputs of the token-level objective for one response.
#[derive(Debug, Clone, Copy)]
pub struct TokenTerms<'a> {
    pub logp_new: &'a [f64],
    pub logp_old: &'a [f64],
    pub advantage: f64,
    /// Inference-side logprobs, needed when TIS is on. The TIS ratio uses
    /// `logp_old` as the training-side value.
    pub logp_infer: Option<&'a [f64]>,
}

/// Objective value and its gradient with respect to every `logp_new`
/// entry (or every sequence total for GSPO).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub objective: f64,
    pub grad: Vec<Vec<f64>>,
    /// Fraction of units whose clipped branch was active.
    pub clip_fraction: f64,
}

/// Clipped token-level objective averaged per sequence, then over
/// sequences. Returned for maximization.
pub fn grpo_loss(seqs: &[TokenTerms<'_>], clip: &ClipConfig, tis: Option<&TisConfig>) -> Result<LossOutput> {
    if seqs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let s = seqs.len() as f64;
    let mut objective = 0.0;
    let mut grad = Vec::with_capacity(seqs.len());
    let (mut clipped, mut units) = (0usize, 0usize);
    for seq in seqs {
        let n = seq.logp_new.len();
        if n == 0 || seq.logp_old.len() != n {
            return Err(Error::Invalid("logprob lists must be nonempty and aligned".into()));
        }
        let infer = match (tis, seq.logp_infer) {
            (Some(_), Some(li)) if li.len() == n => Some(li),
            (Some(_), _) => return Err(Error::Invalid("TIS needs aligned inference logprobs".into())),
            (None, _) => None,
        };
        let scale = 1.0 / (s * n as f64);
        let mut g = Vec::with_capacity(n);
        let mut total = 0.0;
        for t in 0..n {
            let w = libm::exp(seq.logp_new[t] - seq.logp_old[t]);
            if !w.is_finite() {
                return Err(Error::DegenerateRatio);
            }
            let (mut term, mut dw) = clip.surrogate(w, seq.advantage);
            if dw == 0.0 && seq.advantage != 0.0 {
                clipped += 1;
            }
            units += 1;
            if let (Some(cfg), Some(li)) = (tis, infer) {
                let m = cfg.multiplier(seq.logp_old[t], li[t])?;
                term *= m;
                dw *= m;
            }
            total += term;
            // d w / d logp_new = w
            g.push(dw * w * scale);
        }
        objective += total / n as f64;
        grad.push(g);
    }
    Ok(LossOutput {
        objective: objective / s,
        grad,
        clip_fraction: clipped as f64 / units as f64,
    })
}

/// Inputs of the sequence-level objective for one response.
#[derive(Debug, Clone, Copy)]
pub struct SequenceTerms {
    pub seq_logp_new: f64,
    pub seq_logp_old: f64,
    pub len: usize,
    pub advantage: f64,
}

/// Length-normalized sequence-ratio objective averaged over sequences.
/// `grad[i]` holds one entry: the derivative with respect to sequence `i`'s
/// summed logprob.
pub fn gspo_loss(seqs: &[SequenceTerms], clip: &ClipConfig) -> Result<LossOutput> {
    if seqs.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let s = seqs.len() as f64;
    let mut objective = 0.0;
    let mut grad = Vec::with_capacity(seqs.len());
    let mut clipped = 0;
    for q in seqs {
        if q.len == 0 {
            return Err(Error::Invalid("empty response in sequence-level objective".into()));
        }
        let r = libm::exp((q.seq_logp_new - q.seq_logp_old) / q.len as f64);
        if !r.is_finite() {
            return Err(Error::DegenerateRatio);
        }
        let (term, dr) = clip.surrogate(r, q.advantage);
        if dr == 0.0 && q.advantage != 0.0 {
            clipped += 1;
        }
        objective += term;
        grad.push(alloc::vec![dr * r / q.len as f64 / s]);
    }
    Ok(LossOutput {
        objective: objective / s,
        grad,
        clip_fraction: clipped as f64 / s,
    })
}

/// Whether a group's binary rewards are mixed (some but not all correct).
pub fn is_informative(rewards: &[f64]) -> bool {
    let correct = rewards.iter().filter(|&&r| r > 0.5).count();
    correct > 0 && correct < rewards.len()
}

/// Keep only groups whose rewards are neither all 0 nor all 1.
pub fn dynamic_sampling_filter(groups: Vec<Vec<Rollout>>) -> Vec<Vec<Rollout>> {
    groups
        .into_iter()
        .filter(|g| is_informative(&g.iter().map(|r| r.reward).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests;
