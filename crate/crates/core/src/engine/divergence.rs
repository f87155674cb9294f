use alloc::vec::Vec;

use super::EngineProfile;
use crate::diagnostics::{routing_diff_corpus, DiffLevel};
use crate::error::Result;
use crate::model::{forward_logprobs, ForwardOptions, PolicyParams, RoutingTrace};

/// Traces of every `(tokens, prompt_len)` sequence under one profile.
pub fn capture_traces(params: &PolicyParams, profile: &EngineProfile, corpus: &[(Vec<u32>, usize)]) -> Result<Vec<RoutingTrace>> {
    corpus
        .iter()
        .map(|(tokens, prompt)| Ok(forward_logprobs(tokens, *prompt, params, profile, &ForwardOptions::default())?.trace))
        .collect()
}

/// Fraction of `(token, layer)` router decisions that differ between two
/// profiles on the same parameters and sequences.
pub fn divergence_rate(a: &EngineProfile, b: &EngineProfile, params: &PolicyParams, corpus: &[(Vec<u32>, usize)]) -> Result<f64> {
    let ta = capture_traces(params, a, corpus)?;
    let tb = capture_traces(params, b, corpus)?;
    let pairs: Vec<_> = ta.iter().zip(&tb).collect();
    Ok(routing_diff_corpus(&pairs, DiffLevel::Router)?.nonzero_fraction)
}
