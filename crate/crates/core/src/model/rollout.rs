use alloc::vec;
use alloc::vec::Vec;

use super::forward::{entropy_of_logprobs, tempered, InferenceSession};
use super::{PolicyParams, RoutingTrace};
use crate::engine::{self, EngineProfile};
use crate::error::{Error, Result};
use crate::rng;

const SAMPLE_STREAM: u64 = 0x7361_6d70;

/// Decoding settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    /// `0` selects greedy decoding.
    pub temperature: f64,
    pub max_tokens: usize,
    /// Tokens that end the response (they are kept in it).
    pub stop: Vec<u32>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_tokens: 64,
            stop: Vec::new(),
        }
    }
}

/// One sampled response with everything needed to train on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
    /// Log-probability of each response token under the sampling
    /// distribution (after temperature).
    pub logprobs: Vec<f64>,
    /// Same tokens scored at temperature 1.
    pub logprobs_raw: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Masks used at every position of prompt + response.
    pub trace: RoutingTrace,
    pub temperature: f64,
    pub reward: f64,
    pub group: u64,
}

impl Rollout {
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.response);
        t
    }

    /// Temperature the training side should score with: the sampling
    /// temperature, or 1 for greedy rollouts.
    pub fn scoring_temperature(&self) -> f64 {
        if self.temperature > 0.0 {
            self.temperature
        } else {
            1.0
        }
    }
}

/// Sampled rollout plus the number of top-k selections it required.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub rollout: Rollout,
    pub topk_calls: usize,
}

fn pick_token(logp: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &l) in logp.iter().enumerate() {
        acc += libm::exp(l);
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass at the end
    logp.iter()
        .enumerate()
        .rev()
        .find(|(_, l)| l.is_finite())
        .map_or(logp.len() - 1, |(i, _)| i)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Sample a response to `prompt`. Randomness is a pure function of `seed`.
pub fn sample_rollout(
    prompt: &[u32],
    params: &PolicyParams,
    engine: &EngineProfile,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Rollout> {
    generate(prompt, params, engine, sampling, seed, None).map(|g| g.rollout)
}

/// Like [`sample_rollout`], replaying cached masks for a prefix of the
/// prompt. `cached` must describe a prefix of `prompt`.
pub fn generate(
    prompt: &[u32],
    params: &PolicyParams,
    engine: &EngineProfile,
    sampling: &SamplingConfig,
    seed: u64,
    cached: Option<&RoutingTrace>,
) -> Result<Generation> {
    let c = params.config();
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    if sampling.max_tokens == 0 {
        return Err(Error::Invalid("max_tokens must be positive".into()));
    }
    if prompt.len() >= c.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: prompt.len() + 1,
            max: c.max_seq_len,
        });
    }
    if let Some(cache) = cached {
        if !cache.is_prefix_of(prompt) {
            return Err(Error::TraceMismatch);
        }
    }
    let greedy = sampling.temperature <= 0.0;
    let mut session = InferenceSession::new(params, engine);
    let mut logits = Vec::new();
    for (t, &tok) in prompt.iter().enumerate() {
        let forced = cached.filter(|cc| t < cc.len()).map(|cc| cc.masks().token(t));
        logits = session.step(tok, forced)?;
    }
    let v = c.vocab;
    let mut lp_raw = vec![0.0; v];
    let mut lp = vec![0.0; v];
    let mut response = Vec::new();
    let mut logprobs = Vec::new();
    let mut logprobs_raw = Vec::new();
    let mut entropies = Vec::new();
    loop {
        engine::log_softmax_row(&logits, engine.softmax, &mut lp_raw);
        let tok = if greedy {
            lp.copy_from_slice(&lp_raw);
            argmax(&logits)
        } else {
            let mut scaled = logits.clone();
            tempered(&mut scaled, sampling.temperature);
            engine::log_softmax_row(&scaled, engine.softmax, &mut lp);
            pick_token(&lp, rng::uniform(seed, SAMPLE_STREAM, response.len() as u64))
        };
        response.push(tok as u32);
        logprobs.push(lp[tok]);
        logprobs_raw.push(lp_raw[tok]);
        entropies.push(entropy_of_logprobs(&lp));
        let done = sampling.stop.contains(&(tok as u32))
            || response.len() >= sampling.max_tokens
            || prompt.len() + response.len() >= c.max_seq_len;
        // the final token is still fed so the trace spans the whole sequence
        logits = session.step(tok as u32, None)?;
        if done {
            break;
        }
    }
    let topk_calls = session.topk_calls();
    Ok(Generation {
        rollout: Rollout {
            prompt: prompt.to_vec(),
            response,
            logprobs,
            logprobs_raw,
            entropies,
            trace: session.into_trace(),
            temperature: sampling.temperature,
            reward: 0.0,
            group: 0,
        },
        topk_calls,
    })
}
